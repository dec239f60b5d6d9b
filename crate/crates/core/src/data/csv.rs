//! Capture file format: `timestamp,id_hex,dlc,data0_hex,...,flag` with no
//! header. Rows carry exactly `dlc` data columns; the flag is `R` or `T`.

use std::io::Write;
use std::path::Path;

use super::{io_error, AttackClass, CanMessage, DataError, LabelSpace, MAX_EXTENDED_ID, MAX_STANDARD_ID};

/// Reads a capture file. `T` rows get `attack_class_of_file`, `R` rows
/// are normal.
pub fn parse_can_csv(
    path: &Path,
    label_space: LabelSpace,
    attack_class_of_file: AttackClass,
) -> Result<Vec<CanMessage>, DataError> {
    if label_space.index_of(attack_class_of_file).is_none() {
        return Err(DataError::ClassNotInSpace {
            class: attack_class_of_file,
            space: label_space,
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_can_str(&text, &path.display().to_string(), attack_class_of_file)
}

/// Parses capture text. Out-of-order timestamps are logged and the rows
/// stably re-sorted.
pub fn parse_can_str(
    text: &str,
    source_name: &str,
    attack_class_of_file: AttackClass,
) -> Result<Vec<CanMessage>, DataError> {
    let mut messages = Vec::new();
    let mut out_of_order = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let msg = parse_row(row, attack_class_of_file).map_err(err)?;
        if let Some(prev) = messages.last() {
            let prev: &CanMessage = prev;
            if msg.timestamp < prev.timestamp {
                out_of_order += 1;
            }
        }
        messages.push(msg);
    }
    if out_of_order > 0 {
        log::warn!("{source_name}: {out_of_order} rows with decreasing timestamps; re-sorting");
        messages.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(messages)
}

fn parse_row(row: &str, attack_class_of_file: AttackClass) -> Result<CanMessage, String> {
    let fields: Vec<&str> = row.split(',').map(str::trim).collect();
    if fields.len() < 4 {
        return Err(format!("expected at least 4 columns, got {}", fields.len()));
    }
    let timestamp: f64 = fields[0]
        .parse()
        .map_err(|_| format!("invalid timestamp `{}`", fields[0]))?;
    if !(timestamp.is_finite() && timestamp >= 0.0) {
        return Err(format!("invalid timestamp `{}`", fields[0]));
    }
    let can_id = parse_hex(fields[1], MAX_EXTENDED_ID as u64, "identifier")? as u32;
    let dlc: usize = fields[2].parse().map_err(|_| format!("invalid DLC `{}`", fields[2]))?;
    if dlc > 8 {
        return Err(format!("DLC {dlc} exceeds 8"));
    }
    let data_cols = fields.len() - 4;
    if data_cols != dlc {
        return Err(format!("DLC {dlc} but {data_cols} data columns"));
    }
    let mut payload = [0u8; 8];
    for (slot, field) in payload.iter_mut().zip(&fields[3..3 + dlc]) {
        *slot = parse_hex(field, 0xFF, "data byte")? as u8;
    }
    let class = match fields[fields.len() - 1] {
        "R" => AttackClass::Normal,
        "T" if attack_class_of_file == AttackClass::Normal => {
            return Err("attack-flagged row in a capture declared normal".into())
        }
        "T" => attack_class_of_file,
        other => return Err(format!("flag `{other}` is neither R nor T")),
    };
    CanMessage::new(timestamp, can_id, &payload[..dlc], class).map_err(|e| e.to_string())
}

fn parse_hex(field: &str, max: u64, what: &str) -> Result<u64, String> {
    if field.is_empty() || field.len() > 8 {
        return Err(format!("malformed hex {what} `{field}`"));
    }
    let v = u64::from_str_radix(field, 16).map_err(|_| format!("malformed hex {what} `{field}`"))?;
    if v > max {
        return Err(format!("{what} `{field}` out of range"));
    }
    Ok(v)
}

/// One capture row in canonical form: six-decimal timestamp, lowercase hex,
/// 4-digit standard ids and 8-digit extended ids.
pub fn format_row(m: &CanMessage) -> String {
    let mut row = if m.can_id <= MAX_STANDARD_ID {
        format!("{:.6},{:04x},{}", m.timestamp, m.can_id, m.dlc())
    } else {
        format!("{:.6},{:08x},{}", m.timestamp, m.can_id, m.dlc())
    };
    for b in m.payload() {
        row.push_str(&format!(",{b:02x}"));
    }
    row.push(',');
    row.push(m.flag().letter());
    row
}

pub fn write_can_csv<W: Write>(messages: &[CanMessage], mut out: W) -> std::io::Result<()> {
    for m in messages {
        writeln!(out, "{}", format_row(m))?;
    }
    Ok(())
}
