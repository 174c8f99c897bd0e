use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};

/// One JSON object per line on stderr.
struct JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

static JSON_LOGGER: JsonLogger = JsonLogger;

/// Plain logging honors `RUST_LOG` and defaults to info.
pub fn init(json: bool) {
    if json {
        if log::set_logger(&JSON_LOGGER).is_ok() {
            log::set_max_level(LevelFilter::Info);
        }
    } else {
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .format_timestamp(None)
            .target(env_logger::Target::Stderr)
            .init();
    }
}
