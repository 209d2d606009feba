use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Scenario, SceneError};

/// Parses and validates one JSON line; `line` is 1-based and only used in
/// error messages.
pub fn scenario_from_json(text: &str, line: usize) -> Result<Scenario, SceneError> {
    let s: Scenario = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        line,
        message: e.to_string(),
    })?;
    s.validate().map_err(|e| match e {
        SceneError::Invalid { scenario_id, message } => SceneError::InvalidAt {
            line,
            scenario_id,
            message,
        },
        other => other,
    })?;
    Ok(s)
}

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string(s).expect("scenario serializes")
}

/// Reads a JSON-lines scenario file. Blank lines are skipped.
pub fn read_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(scenario_from_json(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenarios {
        w.write_all(scenario_to_json(s).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::simple;
    use super::*;

    #[test]
    fn garbage_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let good = scenario_to_json(&simple(3, 2));
        std::fs::write(&path, format!("{good}\n{good}\nnot json at all\n")).unwrap();
        match read_scenarios(&path) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_view_tag_rejected() {
        let good = scenario_to_json(&simple(3, 2));
        let bad = good.replacen("\"infrastructure\"", "\"satellite\"", 1);
        let err = scenario_from_json(&bad, 7).unwrap_err();
        assert!(matches!(err, SceneError::Parse { line: 7, .. }), "{err}");
        assert!(err.to_string().contains("satellite"));
    }

    #[test]
    fn empty_file_is_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_scenarios(&path).unwrap().is_empty());
    }

    #[test]
    fn wire_field_names() {
        let v: serde_json::Value = serde_json::from_str(&scenario_to_json(&simple(2, 1))).unwrap();
        let agent = &v["agents"][0];
        assert!(agent["xy"].is_array() && agent["mask"].is_array());
        assert_eq!(agent["view"], "vehicle");
        assert!(v["lanes"][0]["start"].is_array());
        assert_eq!(v["t_h"], 2);
    }

    #[test]
    fn horizons_default_when_absent() {
        let mut v: serde_json::Value = serde_json::from_str(&scenario_to_json(&simple(50, 50))).unwrap();
        v.as_object_mut().unwrap().remove("t_h");
        v.as_object_mut().unwrap().remove("t_f");
        let s = scenario_from_json(&v.to_string(), 1).unwrap();
        assert_eq!((s.history_len, s.future_len), (50, 50));
    }

    #[test]
    fn invalid_scenario_names_line() {
        let mut s = simple(3, 2);
        s.ego_agent_id = "nobody".into();
        let err = scenario_from_json(&scenario_to_json(&s), 4).unwrap_err();
        assert!(matches!(err, SceneError::InvalidAt { line: 4, .. }));
    }
}
