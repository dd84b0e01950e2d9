use std::io::BufRead;
use std::path::Path;

use serde_json::Value;

use super::InteractionEvent;
use crate::error::{Error, Result};

/// Reads a JSON-lines event log with keys `user`, `item` and `ts`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<InteractionEvent>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_events(reader: impl BufRead) -> Result<Vec<InteractionEvent>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<events>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            msg: "expected a JSON object".into(),
        })?;
        let text = |field: &'static str| -> Result<String> {
            match obj.get(field) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                _ => Err(Error::MissingField {
                    line: line_no,
                    field,
                }),
            }
        };
        let ts = obj
            .get("ts")
            .and_then(Value::as_i64)
            .filter(|t| *t >= 0)
            .ok_or(Error::MissingField {
                line: line_no,
                field: "ts",
            })?;
        events.push(InteractionEvent {
            user: text("user")?,
            item: text("item")?,
            ts,
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_lines() {
        let src = r#"{"user":"u1","item":"i1","ts":10}
{"user":"u1","item":"i2","ts":5}
{"user":"u2","item":7,"ts":3}
"#;
        let ev = parse_events(src.as_bytes()).unwrap();
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[1].ts, 5);
        assert_eq!(ev[2].item, "7");
    }

    #[test]
    fn malformed_line_is_cited() {
        let src = "{\"user\":\"u\",\"item\":\"i\",\"ts\":1}\n{not json\n";
        match parse_events(src.as_bytes()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field() {
        let src = "{\"user\":\"u\",\"ts\":1}\n";
        assert!(matches!(
            parse_events(src.as_bytes()),
            Err(Error::MissingField {
                line: 1,
                field: "item"
            })
        ));
        let neg = "{\"user\":\"u\",\"item\":\"i\",\"ts\":-4}\n";
        assert!(matches!(
            parse_events(neg.as_bytes()),
            Err(Error::MissingField { field: "ts", .. })
        ));
    }

    #[test]
    fn empty_input() {
        assert!(parse_events("".as_bytes()).unwrap().is_empty());
    }
}
