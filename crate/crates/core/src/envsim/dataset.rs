//! On-disk trajectory datasets.
//!
//! A dataset is a directory holding exactly one of:
//!
//! * `trajectories.bin`: binary, all integers and floats little-endian.
//!   ```text
//!   magic      8 bytes  "DTRLDSET"
//!   version    u32      = 1
//!   name_len   u32, name bytes (UTF-8 env name)
//!   spec_hash  u64
//!   count      u64
//!   per trajectory:
//!     len u64, obs_dim u64, act_dim u64, rtg_form u8 (0 rollout, 1 hindsight),
//!     terminated u8, seed u64, g_init f64,
//!     states f64[len*obs_dim], actions f64[len*act_dim], rewards f64[len],
//!     rtgs f64[len], final_obs f64[obs_dim],
//!     n_logprobs u64, behavior_logprobs f64[n], n_vars u64, action_vars f64[n]
//!   ```
//! * `trajectories.json`: `{"format": "dtrl-dataset", "version": 1, "header": {...},
//!   "trajectories": [...]}`. Floats are written in shortest round-trip decimal
//!   form, so a save/load cycle is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Env;
use crate::error::{Error, Result};
use crate::traj::{RtgForm, Trajectory};

const MAGIC: &[u8; 8] = b"DTRLDSET";
const VERSION: u32 = 1;
const BIN_NAME: &str = "trajectories.bin";
const JSON_NAME: &str = "trajectories.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Binary,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub env_name: String,
    pub spec_hash: u64,
    pub count: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonDataset {
    format: String,
    version: u32,
    header: DatasetHeader,
    trajectories: Vec<Trajectory>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_binary(header: &DatasetHeader, trajs: &[Trajectory]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.env_name.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.env_name.as_bytes());
    put_u64(&mut buf, header.spec_hash);
    put_u64(&mut buf, trajs.len() as u64);
    for tr in trajs {
        let obs_dim = tr.final_obs.len();
        let act_dim = tr.actions.first().map_or(0, Vec::len);
        put_u64(&mut buf, tr.len() as u64);
        put_u64(&mut buf, obs_dim as u64);
        put_u64(&mut buf, act_dim as u64);
        buf.push(match tr.rtg_form {
            RtgForm::Rollout => 0,
            RtgForm::Hindsight => 1,
        });
        buf.push(u8::from(tr.terminated));
        put_u64(&mut buf, tr.seed);
        put_f64s(&mut buf, &[tr.g_init]);
        for s in &tr.states {
            put_f64s(&mut buf, s);
        }
        for a in &tr.actions {
            put_f64s(&mut buf, a);
        }
        put_f64s(&mut buf, &tr.rewards);
        put_f64s(&mut buf, &tr.rtgs);
        put_f64s(&mut buf, &tr.final_obs);
        put_u64(&mut buf, tr.behavior_logprobs.len() as u64);
        put_f64s(&mut buf, &tr.behavior_logprobs);
        put_u64(&mut buf, tr.action_vars.len() as u64);
        put_f64s(&mut buf, &tr.action_vars);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn err(&self, msg: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: format!("{msg} (offset {})", self.pos) }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| self.err("length field too large"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_binary(bytes: &[u8], path: &Path) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let name_len = r.u32()? as usize;
    let env_name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("env name not UTF-8"))?;
    let spec_hash = r.u64()?;
    let count = r.u64()?;
    let mut trajs = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        let obs_dim = r.usize()?;
        let act_dim = r.usize()?;
        let rtg_form = match r.u8()? {
            0 => RtgForm::Rollout,
            1 => RtgForm::Hindsight,
            _ => return Err(r.err("bad rtg form tag")),
        };
        let terminated = r.u8()? != 0;
        let seed = r.u64()?;
        let g_init = r.f64s(1)?[0];
        let states = (0..len).map(|_| r.f64s(obs_dim)).collect::<Result<Vec<_>>>()?;
        let actions = (0..len).map(|_| r.f64s(act_dim)).collect::<Result<Vec<_>>>()?;
        let rewards = r.f64s(len)?;
        let rtgs = r.f64s(len)?;
        let final_obs = r.f64s(obs_dim)?;
        let n = r.usize()?;
        let behavior_logprobs = r.f64s(n)?;
        let n = r.usize()?;
        let action_vars = r.f64s(n)?;
        trajs.push(Trajectory {
            states,
            actions,
            rewards,
            rtgs,
            rtg_form,
            g_init,
            seed,
            final_obs,
            terminated,
            behavior_logprobs,
            action_vars,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok((DatasetHeader { env_name, spec_hash, count }, trajs))
}

/// SHA-256 of the binary encoding, hex encoded.
pub fn dataset_digest(env: &Env, trajs: &[Trajectory]) -> String {
    let header = header_for(env, trajs);
    hex::encode(Sha256::digest(encode_binary(&header, trajs)))
}

fn header_for(env: &Env, trajs: &[Trajectory]) -> DatasetHeader {
    DatasetHeader { env_name: env.spec().name.clone(), spec_hash: env.spec().spec_hash(), count: trajs.len() as u64 }
}

/// Write `trajs` into directory `dir` (created if missing).
pub fn save_dataset(dir: &Path, env: &Env, trajs: &[Trajectory], format: DatasetFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let header = header_for(env, trajs);
    let (path, bytes) = match format {
        DatasetFormat::Binary => (dir.join(BIN_NAME), encode_binary(&header, trajs)),
        DatasetFormat::Json => {
            let doc = JsonDataset {
                format: "dtrl-dataset".into(),
                version: VERSION,
                header,
                trajectories: trajs.to_vec(),
            };
            (dir.join(JSON_NAME), serde_json::to_vec(&doc)?)
        }
    };
    fs::File::create(&path)?.write_all(&bytes)?;
    Ok(path)
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let bin = dir.join(BIN_NAME);
    let json = dir.join(JSON_NAME);
    if bin.exists() {
        let mut bytes = Vec::new();
        fs::File::open(&bin)?.read_to_end(&mut bytes)?;
        decode_binary(&bytes, &bin)
    } else if json.exists() {
        let doc: JsonDataset = serde_json::from_slice(&fs::read(&json)?)?;
        if doc.format != "dtrl-dataset" || doc.version != VERSION {
            return Err(Error::Format { path: json, msg: "unsupported format or version".into() });
        }
        if doc.header.count != doc.trajectories.len() as u64 {
            return Err(Error::Format { path: json, msg: "header count mismatch".into() });
        }
        Ok((doc.header, doc.trajectories))
    } else {
        Err(Error::Input(format!("no dataset found in {}", dir.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_offline_dataset, make_env, EnvSpec, Quality};

    #[test]
    fn both_formats_round_trip_bit_exactly() {
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        let mut data = generate_offline_dataset(&mut env, Quality::Medium, 300, 4).unwrap();
        data[0].behavior_logprobs = vec![-1.234_567_890_123_456_7, 0.1 + 0.2];
        data[0].action_vars = vec![f64::MIN_POSITIVE, 1e300];
        for fmt in [DatasetFormat::Binary, DatasetFormat::Json] {
            let dir = tempfile::tempdir().unwrap();
            save_dataset(dir.path(), &env, &data, fmt).unwrap();
            let (header, back) = load_dataset(dir.path()).unwrap();
            assert_eq!(header.count, data.len() as u64);
            assert_eq!(header.spec_hash, env.spec().spec_hash());
            assert_eq!(dataset_digest(&env, &back), dataset_digest(&env, &data));
        }
    }

    #[test]
    fn truncated_binary_is_a_format_error() {
        let mut env = make_env(EnvSpec::dense(1)).unwrap();
        let data = generate_offline_dataset(&mut env, Quality::Random, 100, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &env, &data, DatasetFormat::Binary).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
