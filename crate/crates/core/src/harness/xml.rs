//! Workload interchange as
//! `<clients><client id t_arrive size w_size t_leave/></clients>`.

use std::fmt::Write as _;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::model::{round_down_pow2, Client, ClientId, Time};

#[derive(Debug, Error)]
pub enum XmlError {
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn line_of(text: &str, pos: usize) -> usize {
    text.as_bytes()[..pos.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

fn parse_time(value: &str, field: &str) -> Result<Time, String> {
    let t: f64 = value.parse().map_err(|_| format!("{field}: '{value}' is not a number"))?;
    if !t.is_finite() || t < 0.0 || t.fract() != 0.0 {
        return Err(format!("{field}: '{value}' is not a whole non-negative time"));
    }
    Ok(t as Time)
}

fn parse_client(e: &BytesStart<'_>) -> Result<Client, String> {
    let (mut id, mut arrive, mut size, mut w_size, mut leave) = (None, None, None, None, None);
    for attr in e.attributes() {
        let attr = attr.map_err(|err| err.to_string())?;
        let value = attr.unescape_value().map_err(|err| err.to_string())?.into_owned();
        match attr.key.as_ref() {
            b"id" => id = Some(value),
            b"t_arrive" => arrive = Some(value),
            b"size" => size = Some(value),
            b"w_size" => w_size = Some(value),
            b"t_leave" => leave = Some(value),
            _ => {}
        }
    }
    let need = |v: Option<String>, name: &str| v.ok_or_else(|| format!("missing attribute {name}"));
    let id: u64 = need(id, "id")?.parse().map_err(|_| "id is not an integer".to_string())?;
    let arrive = parse_time(&need(arrive, "t_arrive")?, "t_arrive")?;
    let leave = parse_time(&need(leave, "t_leave")?, "t_leave")?;
    let size_text = need(size, "size")?;
    let size: f64 = size_text.parse().map_err(|_| format!("size '{size_text}' is not a number"))?;
    let w_size: u64 = need(w_size, "w_size")?.parse().map_err(|_| "w_size is not an integer".to_string())?;
    let expected = round_down_pow2(size).map_err(|err| err.to_string())?;
    if w_size != expected {
        return Err(format!("w_size {w_size} does not match size {size} (expected {expected})"));
    }
    Client::new(ClientId(id), arrive, leave, size).map_err(|err| err.to_string())
}

pub fn parse_workload(text: &str) -> Result<Vec<Client>, XmlError> {
    let mut reader = Reader::from_str(text);
    let mut clients = Vec::new();
    loop {
        let start = reader.buffer_position() as usize;
        let event = reader.read_event().map_err(|err| XmlError::Invalid {
            line: line_of(text, reader.error_position() as usize),
            msg: err.to_string(),
        })?;
        match event {
            Event::Empty(e) | Event::Start(e) if e.name().as_ref() == b"client" => {
                let client = parse_client(&e).map_err(|msg| XmlError::Invalid { line: line_of(text, start), msg })?;
                clients.push(client);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(clients)
}

pub fn render_workload(clients: &[Client]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<clients>\n");
    for c in clients {
        writeln!(
            out,
            "  <client id=\"{}\" t_arrive=\"{}\" size=\"{:?}\" w_size=\"{}\" t_leave=\"{}.0\"/>",
            c.id.0, c.arrive, c.raw_laxity, c.laxity, c.depart
        )
        .expect("writing to a string");
    }
    out.push_str("</clients>\n");
    out
}

pub fn read_workload_xml(path: &Path) -> Result<Vec<Client>, XmlError> {
    parse_workload(&std::fs::read_to_string(path)?)
}

pub fn write_workload_xml(clients: &[Client], path: &Path) -> Result<(), XmlError> {
    std::fs::write(path, render_workload(clients))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_reference_instance() {
        let text = r#"<clients>
  <client id="1" t_arrive="899" size="6.628461669685978" w_size="4" t_leave="1737.0"/>
</clients>"#;
        let clients = parse_workload(text).unwrap();
        assert_eq!(clients.len(), 1);
        let c = &clients[0];
        assert_eq!((c.id, c.arrive, c.depart, c.laxity), (ClientId(1), 899, 1737, 4));
        assert_eq!(c.raw_laxity, 6.628461669685978);
        assert!((500..=1000).contains(&(c.depart - c.arrive)));
    }

    #[test]
    fn rejects_inconsistent_rows_with_line_numbers() {
        let text = "<clients>\n\n  <client id=\"1\" t_arrive=\"899\" size=\"6.628461669685978\" w_size=\"8\" t_leave=\"1737.0\"/>\n</clients>";
        match parse_workload(text) {
            Err(XmlError::Invalid { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("w_size"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = "<clients><client id=\"1\" t_arrive=\"0\" size=\"4\" w_size=\"4\"/></clients>";
        assert!(matches!(parse_workload(missing), Err(XmlError::Invalid { line: 1, .. })));
        let backwards = "<clients><client id=\"1\" t_arrive=\"10\" size=\"4\" w_size=\"4\" t_leave=\"5.0\"/></clients>";
        assert!(parse_workload(backwards).is_err());
    }

    #[test]
    fn round_trip() {
        let clients = vec![
            Client::new(ClientId(1), 899, 1737, 6.628461669685978).unwrap(),
            Client::new(ClientId(2), 900, 2100, 33.25).unwrap(),
            Client::new(ClientId(3), 901, 1500, 2.0).unwrap(),
        ];
        assert_eq!(parse_workload(&render_workload(&clients)).unwrap(), clients);
        assert!(render_workload(&clients).contains("size=\"2.0\""));
    }
}
