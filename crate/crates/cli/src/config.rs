//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cscl_core::encoder::EncoderConfig;
use cscl_core::synth::SceneConfig;
use cscl_core::train::{OptConfig, TrainConfig};
use cscl_core::{LossForm, WindowConfig};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("seed", "0", "root seed; every stage derives its own stream"),
    key("preset", "desk", "model size preset: desk (32 features) or paper (128)"),
    key("scenes", "32", "training scenes generated"),
    key("eval_scenes", "8", "evaluation scenes generated"),
    key("height", "64", "scene height at base resolution"),
    key("width", "64", "scene width at base resolution"),
    key("channels", "4", "spectral channels"),
    key("classes", "5", "number of classes"),
    key("parcels", "20", "Voronoi parcels per scene"),
    key("noise_sigma", "0.05", "per-pixel Gaussian noise"),
    key("mix_boundary", "true", "average fine pixels across parcel edges"),
    key("sr_factor", "4", "super-resolution label factor (1, 2 or 4)"),
    key("excluded_fraction", "0.05", "fraction of parcels marked excluded"),
    key("w_d", "3", "window size"),
    key("w_r", "1", "window dilation"),
    key("w_s", "1", "window stride"),
    key("lambda", "0.125", "positive-pair weight of the lambda loss"),
    key("margin", "0", "hinge margin of the margin loss"),
    key("loss", "lambda", "pre-training loss form: lambda or margin"),
    key("use_pos", "true", "add relative positional encodings to keys"),
    key("hidden", "16,32", "hidden convolution widths"),
    key("d_in", "auto", "embedding features (auto: from preset)"),
    key("d_q", "auto", "query/key features (auto: from preset)"),
    key("super_res", "false", "append the x4 upsampling blocks"),
    key("slope", "0.01", "leaky activation slope"),
    key("lr", "0.0001", "Adam learning rate"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "1e-8", "Adam epsilon"),
    key("decay", "0.975", "learning-rate decay factor"),
    key("decay_every", "2", "epochs between decays"),
    key("reset_at", "none", "epoch at which the learning rate resets"),
    key("epochs", "20", "training epochs"),
    key("batch_size", "8", "scenes per optimizer step"),
    key("flip_p", "0.5", "flip probability per axis"),
    key("variant", "plain", "fine-tuning loss: plain, gamma or balanced"),
    key("init", "random", "fine-tuning start: random or a checkpoint directory"),
    key("data", "data", "dataset root holding train/ and eval/"),
    key("checkpoint", "", "checkpoint directory to evaluate"),
    key("split", "eval", "dataset split to evaluate"),
    key("regions", "all,boundary,interior", "evaluation regions"),
    key("score_sr", "false", "score against the super-resolution labels"),
    key("threshold", "0.5", "affinity threshold for per-position accuracy"),
    key("sizes", "64,128,256", "benchmark grid sizes"),
    key("bench_channels", "32", "benchmark embedding features"),
    key("bench_cfgs", "3:2:2,3:2:4,3:4:2,3:3:3,3:3:6,3:2:3", "benchmark windows as w_d:w_r:w_s"),
    key("check_equivalence", "false", "fail when strided and naive results differ"),
];

pub const RESOLVED_FILE: &str = "config.resolved";

pub fn is_bool_key(name: &str) -> bool {
    KEYS.iter().any(|k| k.name == name && matches!(k.default, "true" | "false"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown configuration key {key:?}"),
        }
    }

    /// Merges a `key=value` file; blank lines and `#` comments are skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| anyhow!("{key}={raw}: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|e| anyhow!("{key}: {s:?}: {e}")))
            .collect()
    }

    /// Replaces `auto` entries with their preset values and validates every
    /// key by parsing it.
    pub fn resolve(mut self) -> Result<Self> {
        let width = match self.raw("preset") {
            "desk" => "32",
            "paper" => "128",
            other => bail!("unknown preset {other:?} (desk|paper)"),
        };
        for k in ["d_in", "d_q"] {
            if self.raw(k) == "auto" {
                self.set(k, width)?;
            }
        }
        self.window()?.validate()?;
        self.scene(0, 0)?.validate()?;
        self.encoder(1)?;
        self.train()?;
        self.get::<usize>("d_q")?;
        self.get::<LossForm>("loss")?;
        self.get::<cscl_core::nn::CeVariant>("variant")?;
        self.get::<bool>("use_pos")?;
        self.get::<bool>("score_sr")?;
        self.get::<bool>("check_equivalence")?;
        self.get::<f64>("threshold")?;
        self.regions()?;
        self.bench_sizes()?;
        self.bench_cfgs()?;
        Ok(self)
    }

    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|k| format!("{}={}\n", k.name, self.raw(k.name))).collect()
    }

    pub fn window(&self) -> Result<WindowConfig> {
        Ok(WindowConfig {
            wd: self.get("w_d")?,
            wr: self.get("w_r")?,
            ws: self.get("w_s")?,
            lambda: self.get("lambda")?,
            margin: self.get("margin")?,
        })
    }

    pub fn scene(&self, seed: u64, palette_seed: u64) -> Result<SceneConfig> {
        Ok(SceneConfig {
            height: self.get("height")?,
            width: self.get("width")?,
            channels: self.get("channels")?,
            num_classes: self.get("classes")?,
            num_parcels: self.get("parcels")?,
            noise_sigma: self.get("noise_sigma")?,
            mix_boundary: self.get("mix_boundary")?,
            sr_factor: self.get("sr_factor")?,
            excluded_fraction: self.get("excluded_fraction")?,
            palette_seed,
            seed,
        })
    }

    pub fn encoder(&self, in_channels: usize) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            in_channels,
            hidden: self.list("hidden")?,
            d_in: self.get("d_in")?,
            super_res: self.get("super_res")?,
            slope: self.get("slope")?,
        })
    }

    pub fn opt(&self) -> Result<OptConfig> {
        let reset_at = match self.raw("reset_at") {
            "none" | "" => None,
            _ => Some(self.get("reset_at")?),
        };
        Ok(OptConfig {
            lr: self.get("lr")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("adam_eps")?,
            decay: self.get("decay")?,
            decay_every: self.get("decay_every")?,
            reset_at,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            flip_p: self.get("flip_p")?,
            seed: self.get("seed")?,
            opt: self.opt()?,
        })
    }

    pub fn regions(&self) -> Result<Vec<cscl_core::metrics::Region>> {
        let r = self.list("regions")?;
        if r.is_empty() {
            bail!("regions must name at least one region");
        }
        Ok(r)
    }

    pub fn bench_sizes(&self) -> Result<Vec<usize>> {
        self.list("sizes")
    }

    pub fn bench_cfgs(&self) -> Result<Vec<WindowConfig>> {
        self.raw("bench_cfgs")
            .split(',')
            .map(|s| {
                let parts: Vec<usize> = s
                    .split(':')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| anyhow!("bench_cfgs: {s:?} is not w_d:w_r:w_s"))?;
                match parts.as_slice() {
                    &[wd, wr, ws] => {
                        let cfg = WindowConfig::new(wd, wr, ws);
                        cfg.validate()?;
                        Ok(cfg)
                    }
                    _ => bail!("bench_cfgs: {s:?} is not w_d:w_r:w_s"),
                }
            })
            .collect()
    }
}
