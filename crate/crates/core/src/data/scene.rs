//! Scene files: whitespace- or comma-delimited rows of
//! `frame_number agent_id x y z wind_vx wind_vy`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::types::{AgentId, Frame};
use crate::error::{Error, Result};

/// Frames grouped by frame number, agents sorted by id within each frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    frames: BTreeMap<u64, Vec<Frame>>,
}

impl Scene {
    pub fn from_frames(frames: impl IntoIterator<Item = Frame>) -> Result<Self> {
        let mut grouped: BTreeMap<u64, Vec<Frame>> = BTreeMap::new();
        for f in frames {
            if !f.is_finite() {
                return Err(Error::non_finite(format!(
                    "frame {} agent {}",
                    f.frame_number, f.agent_id
                )));
            }
            grouped.entry(f.frame_number).or_default().push(f);
        }
        for (number, rows) in grouped.iter_mut() {
            rows.sort_by_key(|f| f.agent_id);
            if let Some(w) = rows.windows(2).find(|w| w[0].agent_id == w[1].agent_id) {
                return Err(Error::Config(format!(
                    "agent {} appears twice in frame {}",
                    w[0].agent_id, number
                )));
            }
        }
        Ok(Scene { frames: grouped })
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, frame_number: u64) -> &[Frame] {
        self.frames.get(&frame_number).map_or(&[], |v| v.as_slice())
    }

    pub fn get(&self, frame_number: u64, agent: AgentId) -> Option<&Frame> {
        let rows = self.frames.get(&frame_number)?;
        rows.binary_search_by_key(&agent, |f| f.agent_id).ok().map(|i| &rows[i])
    }

    pub fn frame_numbers(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.keys().copied()
    }

    /// Every row, ordered by frame then agent.
    pub fn rows(&self) -> impl Iterator<Item = &Frame> {
        self.frames.values().flatten()
    }

    pub fn agents(&self) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = self.rows().map(|f| f.agent_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Time-ordered rows of one agent.
    pub fn track(&self, agent: AgentId) -> Vec<&Frame> {
        self.rows().filter(|f| f.agent_id == agent).collect()
    }
}

fn parse_agent(token: &str) -> Option<AgentId> {
    if let Ok(v) = token.parse::<AgentId>() {
        return Some(v);
    }
    // Some exports write integral ids as floats ("17.0").
    let v: f64 = token.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64).then_some(v as AgentId)
}

/// Parse scene text. `source` names the input in error messages.
pub fn parse_scene(text: &str, source: &str) -> Result<Scene> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 7 {
            return Err(fail(format!("expected 7 fields, found {}", fields.len())));
        }
        let frame_number = match fields[0].parse::<u64>() {
            Ok(v) => v,
            Err(_) => match fields[0].parse::<f64>() {
                Ok(v) if v >= 0.0 && v.fract() == 0.0 => v as u64,
                _ => return Err(fail(format!("invalid frame number {:?}", fields[0]))),
            },
        };
        let agent_id = parse_agent(fields[1]).ok_or_else(|| fail(format!("invalid agent id {:?}", fields[1])))?;
        let names = ["x", "y", "z", "wind_vx", "wind_vy"];
        let mut nums = [0.0; 5];
        for (slot, (tok, name)) in nums.iter_mut().zip(fields[2..].iter().zip(names)) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("invalid {} value {:?}", name, tok)))?;
        }
        frames.push(Frame {
            frame_number,
            agent_id,
            x: nums[0],
            y: nums[1],
            z: nums[2],
            wind_vx: nums[3],
            wind_vy: nums[4],
        });
    }
    if frames.is_empty() {
        return Err(Error::Empty(format!("scene file {}", source)));
    }
    Scene::from_frames(frames)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, &path.display().to_string())
}

/// Space-delimited rows with 17 significant digits, which round-trips fp64.
pub fn format_scene(scene: &Scene) -> String {
    let mut out = String::new();
    for f in scene.rows() {
        let _ = writeln!(
            out,
            "{} {} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            f.frame_number, f.agent_id, f.x, f.y, f.z, f.wind_vx, f.wind_vy
        );
    }
    out
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_scene(scene)).map_err(|e| Error::io(path, e))
}

/// Load every `*.txt` scene in a directory, sorted by file name.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    paths.iter().map(load_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_row() {
        let scene = parse_scene("0 17 1.0 2.0 0.3 0.1 -0.2\n", "mem").unwrap();
        let f = scene.get(0, 17).unwrap();
        assert_eq!(
            *f,
            Frame {
                frame_number: 0,
                agent_id: 17,
                x: 1.0,
                y: 2.0,
                z: 0.3,
                wind_vx: 0.1,
                wind_vy: -0.2
            }
        );
    }

    #[test]
    fn non_numeric_field_names_the_line() {
        let err = parse_scene("0 1 1 2 3 0 0\n1 1 1.0 2.0 abc 0 0\n", "scene.txt").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains('z'));
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_scene("\n  \n", "e"), Err(Error::Empty(_))));
    }

    #[test]
    fn groups_agents_by_frame() {
        let scene = parse_scene("3,2,0,0,0,0,0\n3,1,1,1,1,0,0\n4,1,2,2,2,0,0\n", "c").unwrap();
        let ids: Vec<_> = scene.frame(3).iter().map(|f| f.agent_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(scene.agents(), vec![1, 2]);
        assert_eq!(scene.frame_numbers().collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn writer_round_trips_exactly() {
        let text = "0 1 0.1 -2.718281828459045 1e-7 3.3 -0.0001\n1 1 0.30000000000000004 5 6 7 8\n";
        let scene = parse_scene(text, "a").unwrap();
        let again = parse_scene(&format_scene(&scene), "b").unwrap();
        assert_eq!(scene, again);
    }

    #[test]
    fn duplicate_agent_in_frame_is_rejected() {
        assert!(parse_scene("0 1 0 0 0 0 0\n0 1 1 1 1 0 0\n", "d").is_err());
    }
}
