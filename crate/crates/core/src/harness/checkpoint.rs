use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::envs::TaskId;
use crate::marl::TrainConfig;
use crate::nn::{Architecture, Params, Policy};
use crate::numcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "xmexp-checkpoint";
const END: &str = "end";

/// A trained policy together with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub task: TaskId,
    pub train_agents: usize,
    pub train_config: TrainConfig,
    pub params: Params,
    /// collector iterations completed
    pub iteration: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(policy: &Policy, train_config: &TrainConfig, iteration: usize, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            task: policy.task,
            train_agents: policy.train_agents,
            train_config: train_config.clone(),
            params: policy.params.clone(),
            iteration,
            seed,
        }
    }

    pub fn policy(&self) -> Result<Policy, HarnessError> {
        Ok(Policy::new(self.task, self.train_agents, self.params.clone())?)
    }

    pub fn regularized(&self) -> bool {
        self.train_config.attention_entropy_weight > 0.0
    }
}

fn manifest(ckpt: &Checkpoint) -> String {
    let mut m = format!(
        "{MAGIC}\nversion={}\ntask={}\ntrain_agents={}\niteration={}\nseed={}\n",
        ckpt.version, ckpt.task, ckpt.train_agents, ckpt.iteration, ckpt.seed
    );
    for (k, v) in ckpt.train_config.entries() {
        m.push_str(&format!("train.{k}={v}\n"));
    }
    let mut offset = 0;
    for (name, t) in ckpt.params.entries() {
        m.push_str(&format!("param={name} {} {} {offset}\n", t.rows(), t.cols()));
        offset += t.len();
    }
    m
}

fn checksum(manifest: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest.as_bytes());
    h.update(payload);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Text manifest, a `checksum=` line, `end`, then little-endian f64 values.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let manifest = manifest(ckpt);
    let payload: Vec<u8> = ckpt
        .params
        .entries()
        .iter()
        .flat_map(|(_, t)| t.data().iter().flat_map(|x| x.to_le_bytes()))
        .collect();
    let mut out = manifest.clone().into_bytes();
    out.extend_from_slice(format!("checksum={}\n{END}\n", checksum(&manifest, &payload)).as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| HarnessError::io(path, e))
}

fn format_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

/// Parses and verifies a checkpoint. With `expect_task` the parameters are
/// validated against that task's architecture instead of the recorded one.
pub fn decode_checkpoint(bytes: &[u8], expect_task: Option<TaskId>) -> Result<Checkpoint, HarnessError> {
    let marker = format!("\n{END}\n");
    let split = bytes.windows(marker.len()).position(|w| w == marker.as_bytes());
    let head_end = split.map(|p| p + 1).unwrap_or(bytes.len());
    let head = String::from_utf8_lossy(&bytes[..head_end]);
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(format_err("not a checkpoint file"));
    }
    let mut fields: Vec<(&str, &str)> = Vec::new();
    for line in lines {
        if let Some(kv) = line.split_once('=') {
            fields.push(kv);
        }
    }
    let field = |k: &str| fields.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
    let version: u32 = field("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err("missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let Some(split) = split else {
        return Err(HarnessError::Checksum {
            expected: field("checksum").unwrap_or("").to_string(),
            found: "<truncated manifest>".into(),
        });
    };
    let text = String::from_utf8_lossy(&bytes[..split + 1]);
    let check_line = text
        .rfind("checksum=")
        .ok_or_else(|| format_err("missing checksum"))?;
    let manifest_text = &text[..check_line];
    let stored = text[check_line + "checksum=".len()..].trim().to_string();
    let payload = &bytes[split + marker.len()..];
    let found = checksum(manifest_text, payload);
    if found != stored {
        return Err(HarnessError::Checksum { expected: stored, found });
    }

    let parse_usize = |k: &str| -> Result<usize, HarnessError> {
        field(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format_err(format!("missing or bad '{k}'")))
    };
    let task: TaskId = field("task").ok_or_else(|| format_err("missing task"))?.parse()?;
    let train_agents = parse_usize("train_agents")?;
    let iteration = parse_usize("iteration")?;
    let seed: u64 = field("seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err("missing seed"))?;
    let mut train_config = TrainConfig::paper(task);
    for (k, v) in &fields {
        if let Some(key) = k.strip_prefix("train.") {
            train_config.set(key, v)?;
        }
    }
    let mut entries = Vec::new();
    for (k, v) in &fields {
        if *k != "param" {
            continue;
        }
        let parts: Vec<&str> = v.split(' ').collect();
        let [name, rows, cols, offset] = parts[..] else {
            return Err(format_err(format!("bad param line '{v}'")));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad param line '{v}'")));
        let (rows, cols, offset) = (num(rows)?, num(cols)?, num(offset)?);
        let start = offset * 8;
        let end = start + rows * cols * 8;
        let chunk = payload
            .get(start..end)
            .ok_or_else(|| format_err(format!("payload too short for '{name}'")))?;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name.to_string(), Tensor::new(rows, cols, data)?));
    }
    let params = Params::new(entries);
    let arch_task = expect_task.unwrap_or(task);
    params.validate(&Architecture::for_task(arch_task), train_agents)?;
    Ok(Checkpoint {
        version,
        task: arch_task,
        train_agents,
        train_config,
        params,
        iteration,
        seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    load_checkpoint_as(path, None)
}

pub fn load_checkpoint_as(path: &Path, expect_task: Option<TaskId>) -> Result<Checkpoint, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_checkpoint(&bytes, expect_task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NnError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt(task: TaskId) -> Checkpoint {
        let policy = Policy::init(task, 3, &mut ChaCha8Rng::seed_from_u64(1));
        Checkpoint::new(&policy, &TrainConfig::desk(task), 12, 77)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for task in TaskId::ALL {
            let c = ckpt(task);
            let back = decode_checkpoint(&encode_checkpoint(&c), None).unwrap();
            assert_eq!(back, c);
            for ((_, a), (_, b)) in back.params.entries().iter().zip(c.params.entries()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = encode_checkpoint(&ckpt(TaskId::Navigation));
        for cut in [bytes.len() - 1, bytes.len() / 2, 200] {
            assert!(matches!(decode_checkpoint(&bytes[..cut], None), Err(HarnessError::Checksum { .. })));
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped, None), Err(HarnessError::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let bytes = encode_checkpoint(&ckpt(TaskId::Navigation));
        let text = String::from_utf8_lossy(&bytes).replacen("version=1", "version=9", 1);
        assert!(matches!(
            decode_checkpoint(text.as_bytes(), None),
            Err(HarnessError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn wrong_task_names_first_parameter() {
        let bytes = encode_checkpoint(&ckpt(TaskId::Passage));
        match decode_checkpoint(&bytes, Some(TaskId::Navigation)) {
            Err(HarnessError::Nn(NnError::ParamShape { name, .. })) => assert_eq!(name, "gat.w_src"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
