//! Named-tensor checkpoints.
//!
//! A checkpoint is UTF-8 text:
//!
//! ```text
//! annp-checkpoint 1
//! meta mask_mode variable
//! meta chunk_frames 6
//! meta dim 64
//! ...
//! tensor audio.input.weight 16 64
//! <rows × cols values, row-major, space separated>
//! ...
//! end
//! ```
//!
//! Every model dimension is stored as a `meta` line so the parameter layout
//! can be rebuilt before the tensors are read back. Values are written in
//! shortest round-trip exponent form, so loading restores every weight
//! bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MaskSetting, ModelConfig, ModelParams};
use crate::tensor::Matrix;

const HEADER: &str = "annp-checkpoint 1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub mask_mode: MaskSetting,
    pub chunk_frames: usize,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = &self.params.config;
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        let meta: [(&str, String); 11] = [
            ("mask_mode", self.mask_mode.to_string()),
            ("chunk_frames", self.chunk_frames.to_string()),
            ("feature_dim", c.feature_dim.to_string()),
            ("dim", c.dim.to_string()),
            ("heads", c.heads.to_string()),
            ("ffn_dim", c.ffn_dim.to_string()),
            ("audio_layers", c.audio_layers.to_string()),
            ("label_layers", c.label_layers.to_string()),
            ("context_layers", c.context_layers.to_string()),
            ("joint_dim", c.joint_dim.to_string()),
            ("max_phrase_len", c.max_phrase_len.to_string()),
        ];
        for (key, value) in meta {
            let _ = writeln!(out, "meta {key} {value}");
        }
        for (name, m) in self.params.store.iter() {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            let line: Vec<String> = m.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(Error::parse(path, 1, "missing checkpoint header")),
        }
        let mut config = ModelConfig::default();
        let mut mask_mode = MaskSetting::default();
        let mut chunk_frames = 6;
        let mut params: Option<ModelParams> = None;
        let mut seen = std::collections::HashSet::new();
        let mut finished = false;

        while let Some((no, line)) = lines.next() {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["meta", key, value] => {
                    if params.is_some() {
                        return Err(Error::parse(path, no, "meta line after tensors"));
                    }
                    if *key == "mask_mode" {
                        mask_mode = value.parse().map_err(|e: Error| Error::parse(path, no, e.to_string()))?;
                        continue;
                    }
                    let v: usize = value
                        .parse()
                        .map_err(|_| Error::parse(path, no, format!("bad value for {key}")))?;
                    match *key {
                        "chunk_frames" => chunk_frames = v,
                        "feature_dim" => config.feature_dim = v,
                        "dim" => config.dim = v,
                        "heads" => config.heads = v,
                        "ffn_dim" => config.ffn_dim = v,
                        "audio_layers" => config.audio_layers = v,
                        "label_layers" => config.label_layers = v,
                        "context_layers" => config.context_layers = v,
                        "joint_dim" => config.joint_dim = v,
                        "max_phrase_len" => config.max_phrase_len = v,
                        other => return Err(Error::parse(path, no, format!("unknown meta key {other}"))),
                    }
                }
                ["tensor", name, rows, cols] => {
                    if params.is_none() {
                        params = Some(
                            ModelParams::new(config.clone(), 0)
                                .map_err(|e| Error::parse(path, no, e.to_string()))?,
                        );
                    }
                    let p = params.as_mut().expect("initialised above");
                    let id = p
                        .store
                        .id(name)
                        .ok_or_else(|| Error::parse(path, no, format!("unknown tensor {name}")))?;
                    if !seen.insert(id) {
                        return Err(Error::parse(path, no, format!("duplicate tensor {name}")));
                    }
                    let shape = (
                        rows.parse::<usize>().map_err(|_| Error::parse(path, no, "bad row count"))?,
                        cols.parse::<usize>().map_err(|_| Error::parse(path, no, "bad column count"))?,
                    );
                    if shape != p.store.get(id).shape() {
                        return Err(Error::parse(path, no, format!("shape mismatch for {name}")));
                    }
                    let (vno, values) = lines
                        .next()
                        .ok_or_else(|| Error::parse(path, no + 1, "missing tensor values"))?;
                    let data = values
                        .split(' ')
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|_| Error::parse(path, vno, "bad tensor value"))?;
                    if data.len() != shape.0 * shape.1 {
                        return Err(Error::parse(path, vno, "wrong number of tensor values"));
                    }
                    *p.store.get_mut(id) = Matrix::from_vec(shape.0, shape.1, data);
                }
                ["end"] => {
                    finished = true;
                    if let Some((no, _)) = lines.next() {
                        return Err(Error::parse(path, no, "data after end marker"));
                    }
                }
                _ => return Err(Error::parse(path, no, "unrecognised line")),
            }
        }
        if !finished {
            return Err(Error::parse(path, text.lines().count() + 1, "truncated checkpoint"));
        }
        let params = params.ok_or_else(|| Error::parse(path, 1, "checkpoint has no tensors"))?;
        if seen.len() != params.store.len() {
            let missing = params
                .store
                .ids()
                .find(|id| !seen.contains(id))
                .map(|id| params.store.name(id).to_string())
                .unwrap_or_default();
            return Err(Error::corrupt(path, format!("missing tensor {missing}")));
        }
        Ok(Self {
            params,
            mask_mode,
            chunk_frames,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}
