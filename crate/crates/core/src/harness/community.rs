//! Synthetic user communities with clustered latent preferences.
//!
//! Every latent cluster owns a low-rank style matrix; each user's teacher
//! model is the base head plus a scaled copy of that style and a small
//! user-specific perturbation. History and test items pair a random input
//! with the teacher's greedy generation, so users in one cluster prefer
//! similar outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{BaseParams, DenseParams, EffectiveParams, Matrix};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::model::{Example, TaskModel, Vocab, LM_HEAD};
use crate::profile::UserRecord;

use super::derive_seed;

pub const COMMUNITY_FILE: &str = "community.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const BASE_FILE: &str = "base.lrad";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunityConfig {
    pub n_clusters_latent: usize,
    pub users_per_cluster: usize,
    /// Users per latent cluster held out as targets; the rest may share.
    pub test_users_per_cluster: usize,
    pub history_len: usize,
    pub test_items: usize,
    pub vocab_size: usize,
    pub input_len: usize,
    pub max_len: usize,
    pub style_strength: f64,
    pub style_rank: usize,
    /// Scale of the per-user perturbation relative to the cluster style.
    pub user_noise: f64,
    /// Standard deviation of the base head entries.
    pub base_scale: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        Self {
            n_clusters_latent: 5,
            users_per_cluster: 10,
            test_users_per_cluster: 2,
            history_len: 40,
            test_items: 10,
            vocab_size: 24,
            input_len: 5,
            max_len: 8,
            style_strength: 1.0,
            style_rank: 3,
            user_noise: 0.5,
            base_scale: 1.0,
            embed_dim: 64,
            seed: 7,
        }
    }
}

impl CommunityConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_clusters_latent", self.n_clusters_latent),
            ("users_per_cluster", self.users_per_cluster),
            ("history_len", self.history_len),
            ("test_items", self.test_items),
            ("input_len", self.input_len),
            ("max_len", self.max_len),
            ("style_rank", self.style_rank),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be at least 3".into()));
        }
        if self.test_users_per_cluster == 0 || self.test_users_per_cluster >= self.users_per_cluster {
            return Err(Error::Config(
                "test_users_per_cluster must leave at least one sharer per cluster".into(),
            ));
        }
        for (name, v) in [
            ("style_strength", self.style_strength),
            ("user_noise", self.user_noise),
            ("base_scale", self.base_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_clusters_latent * self.users_per_cluster
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// May be picked into the sharer pool.
    Pool,
    /// Target user with held-out test items.
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Pool => "pool",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(Role::Pool),
            "test" => Ok(Role::Test),
            other => Err(Error::Format(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommunityUser {
    pub record: UserRecord,
    pub role: Role,
    pub cluster: usize,
    /// Held-out items, never used for optimization.
    pub test: Vec<Example>,
}

impl CommunityUser {
    pub fn id(&self) -> &str {
        &self.record.user_id
    }
}

#[derive(Debug, Clone)]
pub struct Community {
    pub vocab: Vocab,
    pub base: BaseParams,
    pub users: Vec<CommunityUser>,
    /// Present only for freshly generated communities.
    pub teachers: BTreeMap<String, EffectiveParams>,
    pub max_len: usize,
    pub embed_dim: usize,
}

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if sd == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, sd).expect("finite sd");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Base head: Gaussian entries, a negative self-transition diagonal so
/// greedy outputs do not stall on one token, and a suppressed end token
/// from the begin state.
pub fn base_head(v: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut w = gaussian(v, 2 * v, scale, rng);
    for i in 1..v {
        w[(i, i)] -= 2.0 * scale;
    }
    w[(0, 0)] -= 4.0 * scale;
    w
}

impl Community {
    pub fn model(&self) -> TaskModel {
        self.vocab.model()
    }

    pub fn user(&self, id: &str) -> Result<&CommunityUser> {
        self.users
            .iter()
            .find(|u| u.id() == id)
            .ok_or_else(|| Error::Data(format!("unknown user `{id}`")))
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &CommunityUser> {
        self.users.iter().filter(move |u| u.role == role)
    }

    pub fn generate(config: &CommunityConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::synthetic(config.vocab_size)?;
        let model = vocab.model();
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let base = DenseParams::single(LM_HEAD, base_head(v, config.base_scale, &mut rng));
        let w0 = base.site(LM_HEAD)?.clone();
        let style_sd = 1.0 / (config.style_rank as f64).sqrt();
        let styles: Vec<Matrix> = (0..config.n_clusters_latent)
            .map(|_| {
                let u = gaussian(v, config.style_rank, 1.0, &mut rng);
                let vt = gaussian(config.style_rank, 2 * v, style_sd, &mut rng);
                u * vt
            })
            .collect();

        let mut users = Vec::with_capacity(config.n_users());
        let mut teachers = BTreeMap::new();
        for (c, style) in styles.iter().enumerate() {
            for i in 0..config.users_per_cluster {
                let idx = c * config.users_per_cluster + i;
                let id = format!("u{idx:03}");
                let mut urng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, idx as u64 + 1));
                let noise = gaussian(v, 2 * v, config.user_noise, &mut urng);
                let head = &w0 + (style + noise) * config.style_strength;
                let teacher = DenseParams::single(LM_HEAD, head);
                let mut draw = |n: usize| -> Result<Vec<Example>> {
                    (0..n)
                        .map(|_| teacher_example(&model, &teacher, config, &mut urng))
                        .collect()
                };
                let history = draw(config.history_len)?;
                let test = draw(config.test_items)?;
                let role = if i >= config.users_per_cluster - config.test_users_per_cluster {
                    Role::Test
                } else {
                    Role::Pool
                };
                users.push(CommunityUser {
                    record: UserRecord::new(id.clone(), history, config.embed_dim),
                    role,
                    cluster: c,
                    test,
                });
                teachers.insert(id, teacher);
            }
        }
        Ok(Self {
            vocab,
            base,
            users,
            teachers,
            max_len: config.max_len,
            embed_dim: config.embed_dim,
        })
    }

    /// Writes `community.txt`, `vocab.txt` and the base head as `base.lrad`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(COMMUNITY_FILE))?);
        self.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join(VOCAB_FILE))?);
        self.vocab.write(&mut w)?;
        w.flush()?;
        container::save(dir.join(BASE_FILE), &Container::Dense(self.base.clone()))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let vocab = Vocab::read(BufReader::new(fs::File::open(dir.join(VOCAB_FILE))?))?;
        let base = container::load(dir.join(BASE_FILE))?.into_dense()?;
        Self::read(BufReader::new(fs::File::open(dir.join(COMMUNITY_FILE))?), vocab, base)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "community 1")?;
        writeln!(w, "vocab_size {}", self.vocab.size())?;
        writeln!(w, "max_len {}", self.max_len)?;
        writeln!(w, "embed_dim {}", self.embed_dim)?;
        let line = |w: &mut W, tag: &str, toks: &[usize]| -> Result<()> {
            writeln!(w, "{tag} {}", self.vocab.decode(toks)?)?;
            Ok(())
        };
        for u in &self.users {
            writeln!(w)?;
            writeln!(w, "user {}", u.id())?;
            writeln!(w, "role {}", u.role)?;
            writeln!(w, "cluster {}", u.cluster)?;
            writeln!(w, "history {}", u.record.history.len())?;
            for ex in &u.record.history {
                line(&mut w, "in", &ex.input)?;
                line(&mut w, "out", &ex.reference)?;
            }
            writeln!(w, "test {}", u.test.len())?;
            for ex in &u.test {
                line(&mut w, "in", &ex.input)?;
                line(&mut w, "out", &ex.reference)?;
            }
            writeln!(w, "end")?;
        }
        Ok(())
    }

    /// Parses a community file; teachers are not stored, so the result has none.
    pub fn read<R: BufRead>(r: R, vocab: Vocab, base: BaseParams) -> Result<Self> {
        let mut lines = r.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let mut next = || -> Result<String> {
            lines
                .next()
                .unwrap_or_else(|| Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof)))
                .map_err(Error::from)
        };
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' ').or((rest.is_empty()).then_some("")))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected `{key}`, found `{line}`")))
        };
        let number = |s: String| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
        };

        if next()? != "community 1" {
            return Err(Error::Format("not a community file".into()));
        }
        let vocab_size = number(field(&next()?, "vocab_size")?)?;
        if vocab_size != vocab.size() {
            return Err(Error::Format(format!(
                "community uses {vocab_size} tokens, vocabulary has {}",
                vocab.size()
            )));
        }
        let max_len = number(field(&next()?, "max_len")?)?;
        let embed_dim = number(field(&next()?, "embed_dim")?)?;

        let mut users = Vec::new();
        loop {
            let header = match next() {
                Ok(l) => l,
                Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e),
            };
            let id = field(&header, "user")?;
            let role: Role = field(&next()?, "role")?.parse()?;
            let cluster = number(field(&next()?, "cluster")?)?;
            let mut items = |key: &str| -> Result<Vec<Example>> {
                let n = number(field(&next()?, key)?)?;
                (0..n)
                    .map(|_| {
                        let input = vocab.encode(&field(&next()?, "in")?)?;
                        let reference = vocab.encode(&field(&next()?, "out")?)?;
                        Example::new(input, reference)
                    })
                    .collect()
            };
            let history = items("history")?;
            let test = items("test")?;
            if next()? != "end" {
                return Err(Error::Format(format!("user `{id}` block not terminated")));
            }
            users.push(CommunityUser {
                record: UserRecord::new(id, history, embed_dim),
                role,
                cluster,
                test,
            });
        }
        Ok(Self {
            vocab,
            base,
            users,
            teachers: BTreeMap::new(),
            max_len,
            embed_dim,
        })
    }
}

fn teacher_example(
    model: &TaskModel,
    teacher: &EffectiveParams,
    config: &CommunityConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    for _ in 0..100 {
        let input: Vec<usize> = (0..config.input_len)
            .map(|_| rng.random_range(1..config.vocab_size))
            .collect();
        let reference = model.generate(teacher, &input, config.max_len)?;
        if !reference.is_empty() {
            return Example::new(input, reference);
        }
    }
    Err(Error::Config(
        "teacher keeps emitting empty outputs; lower style_strength or raise base_scale".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CommunityConfig {
        CommunityConfig {
            n_clusters_latent: 2,
            users_per_cluster: 3,
            test_users_per_cluster: 1,
            history_len: 4,
            test_items: 2,
            ..CommunityConfig::default()
        }
    }

    #[test]
    fn counts_and_roles() {
        let c = Community::generate(&small()).unwrap();
        assert_eq!(c.users.len(), 6);
        assert_eq!(c.with_role(Role::Test).count(), 2);
        assert!(c.users.iter().all(|u| u.record.history.len() == 4 && u.test.len() == 2));
    }

    #[test]
    fn zero_style_means_base_references() {
        let cfg = CommunityConfig {
            style_strength: 0.0,
            ..small()
        };
        let c = Community::generate(&cfg).unwrap();
        let m = c.model();
        for u in &c.users {
            assert_eq!(c.teachers[u.id()], c.base);
            for ex in &u.record.history {
                assert_eq!(m.generate(&c.base, &ex.input, cfg.max_len).unwrap(), ex.reference);
            }
        }
    }

    #[test]
    fn file_roundtrip_is_stable() {
        let c = Community::generate(&small()).unwrap();
        let mut a = Vec::new();
        c.write(&mut a).unwrap();
        let back = Community::read(a.as_slice(), c.vocab.clone(), c.base.clone()).unwrap();
        let mut b = Vec::new();
        back.write(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.users[1].record.history, c.users[1].record.history);
    }

    #[test]
    fn bad_configs_rejected() {
        for cfg in [
            CommunityConfig { users_per_cluster: 0, ..small() },
            CommunityConfig { test_users_per_cluster: 3, ..small() },
            CommunityConfig { style_strength: f64::NAN, ..small() },
            CommunityConfig { vocab_size: 2, ..small() },
        ] {
            assert!(matches!(Community::generate(&cfg), Err(Error::Config(_))));
        }
    }
}
