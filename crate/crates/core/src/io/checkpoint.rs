use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rcm::{BackboneConfig, RcmConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "iretinex-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model weights plus the run metadata needed to rebuild the layout.
///
/// On disk: a UTF-8 header of `key value` lines, one `param` line per tensor
/// (`param <name> <byte offset> <dims joined by x>`), an `end` line, then the
/// values as little-endian `f32` in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub seed: u64,
    pub iteration: u64,
}

fn bool_flag(b: bool) -> u8 {
    u8::from(b)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let b = &cfg.backbone;
        let mut head = String::new();
        let _ = writeln!(head, "{MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(head, "channels {}", b.channels);
        let _ = writeln!(head, "depth {}", b.depth);
        let _ = writeln!(head, "s {}", b.rcm.s);
        let _ = writeln!(head, "units {}", b.units);
        let _ = writeln!(head, "icrr_width {}", cfg.icrr_width);
        let _ = writeln!(head, "shared_ses {}", bool_flag(b.rcm.shared_ses));
        let _ = writeln!(head, "ses_conv_first {}", bool_flag(b.rcm.ses_conv_first));
        let _ = writeln!(head, "ffn_depthwise {}", bool_flag(b.rcm.ffn_depthwise));
        let _ = writeln!(head, "seed {}", self.seed);
        let _ = writeln!(head, "iteration {}", self.iteration);
        let _ = writeln!(head, "params {}", self.model.params.len());
        let mut offset = 0usize;
        for (name, t) in self.model.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(head, "param {name} {offset} {}", dims.join("x"));
            offset += 4 * t.numel();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(origin, msg);
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fail("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| fail("header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let mut it = lines.into_iter();
        let first = it.next().ok_or_else(|| fail("empty header".into()))?;
        if first != format!("{MAGIC} {CHECKPOINT_VERSION}") {
            return Err(fail(format!("unrecognized header line {first:?}")));
        }
        let mut field = |key: &str| -> Result<u64> {
            let line = it.next().ok_or_else(|| fail(format!("missing {key}")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => v.parse().map_err(|_| fail(format!("bad value for {key}: {v:?}"))),
                _ => Err(fail(format!("expected {key}, found {line:?}"))),
            }
        };
        let channels = field("channels")? as usize;
        let depth = field("depth")? as usize;
        let s = field("s")? as usize;
        let units = field("units")? as usize;
        let icrr_width = field("icrr_width")? as usize;
        let shared_ses = field("shared_ses")? != 0;
        let ses_conv_first = field("ses_conv_first")? != 0;
        let ffn_depthwise = field("ffn_depthwise")? != 0;
        let seed = field("seed")?;
        let iteration = field("iteration")?;
        let count = field("params")? as usize;
        let config = ModelConfig {
            icrr_width,
            backbone: BackboneConfig {
                channels,
                depth,
                units,
                rcm: RcmConfig {
                    s,
                    shared_ses,
                    ses_conv_first,
                    ffn_depthwise,
                },
            },
        };
        let mut model = Model::skeleton(config).map_err(|e| fail(format!("invalid architecture: {e}")))?;
        if count != model.params.len() {
            return Err(fail(format!(
                "manifest lists {count} tensors, architecture has {}",
                model.params.len()
            )));
        }
        let blob = &bytes[pos..];
        let mut expected_offset = 0usize;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let line = it.next().ok_or_else(|| fail("manifest ended early".into()))?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [tag, name, offset, dims] = parts[..] else {
                return Err(fail(format!("malformed manifest line {line:?}")));
            };
            let want = model.params.get(id).shape().to_vec();
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| fail(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            if tag != "param" || name != model.params.name(id) || shape != want {
                return Err(fail(format!(
                    "manifest entry {line:?} does not match {} {:?}",
                    model.params.name(id),
                    want
                )));
            }
            let offset: usize = offset.parse().map_err(|_| fail(format!("bad offset in {line:?}")))?;
            if offset != expected_offset {
                return Err(fail(format!("offset {offset} for {name}, expected {expected_offset}")));
            }
            let n = shape.iter().product::<usize>();
            let raw = blob
                .get(offset..offset + 4 * n)
                .ok_or_else(|| fail(format!("blob truncated inside {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            model.params.set(id, Tensor::new(shape, data)?)?;
            expected_offset += 4 * n;
        }
        if it.next().is_some() {
            return Err(fail("extra header lines after the manifest".into()));
        }
        if blob.len() != expected_offset {
            return Err(fail(format!(
                "blob holds {} bytes, manifest needs {expected_offset}",
                blob.len()
            )));
        }
        Ok(Self {
            model,
            seed,
            iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
