//! Deterministic fixed-length text embeddings and command-script parsing.
//!
//! The embedding is a bag-of-tokens model: each normalized token hashes
//! (64-bit FNV-1a) into a seeded Gaussian projection table, the per-token
//! vectors are summed and the result L2-normalized. It preserves the
//! interface of a learned 512-d sentence encoder and gives graded similarity
//! for overlapping phrasings; it does not reproduce learned semantics.

use nalgebra::DVector;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Embedding dimensionality.
pub const EMBED_DIM: usize = 512;

/// Seed of the projection table shipped with the toolkit.
pub const DEFAULT_EMBED_SEED: u64 = 0x00c0_ffee_5eed_0001;

/// A unit-norm 512-vector embedding of a text command.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(DVector<f64>);

impl TextEmbedding {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        if v.len() != EMBED_DIM {
            return Err(Error::invalid(format!(
                "embedding length {} != {EMBED_DIM}",
                v.len()
            )));
        }
        if (v.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("embedding must be unit norm"));
        }
        Ok(TextEmbedding(v))
    }
}

/// Lowercase, strip punctuation to spaces, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Standard normal draw via Box-Muller on explicitly constructed uniforms,
/// so the stream is pinned to the ChaCha output bits alone.
fn next_normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let to_unit = |x: u64| ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let u1 = to_unit(rng.next_u64());
    let u2 = to_unit(rng.next_u64());
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

fn token_vector(token: &str, seed: u64) -> DVector<f64> {
    // Combine the table seed with the token hash through a second FNV pass
    // so nearby seeds do not alias.
    let mut key = Vec::with_capacity(16);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(&fnv1a64(token.as_bytes()).to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
    let mut v = DVector::zeros(EMBED_DIM);
    for i in 0..EMBED_DIM / 2 {
        let (a, b) = next_normal_pair(&mut rng);
        v[2 * i] = a;
        v[2 * i + 1] = b;
    }
    v
}

/// Embed a text command with the shipped projection seed.
pub fn embed_text(text: &str) -> Result<TextEmbedding> {
    embed_text_seeded(text, DEFAULT_EMBED_SEED)
}

/// Embed a text command with an explicit projection-table seed.
pub fn embed_text_seeded(text: &str, seed: u64) -> Result<TextEmbedding> {
    let tokens = normalize_tokens(text);
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    let mut acc = DVector::zeros(EMBED_DIM);
    for token in &tokens {
        acc += token_vector(token, seed);
    }
    let norm = acc.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::numerical("embedding accumulated to zero"));
    }
    Ok(TextEmbedding(acc / norm))
}

/// Cosine similarity of two embeddings, clamped to [-1, 1].
pub fn similarity(a: &TextEmbedding, b: &TextEmbedding) -> f64 {
    a.0.dot(&b.0).clamp(-1.0, 1.0)
}

/// One timed command of a script.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub text: String,
    /// Duration in seconds, strictly positive.
    pub duration: f64,
}

/// An ordered list of timed commands.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandScript {
    pub commands: Vec<Command>,
}

impl CommandScript {
    pub fn total_duration(&self) -> f64 {
        self.commands.iter().map(|c| c.duration).sum()
    }
}

/// Parse a command script: one `<command>: <seconds>` per line, `#` comments
/// and blank lines allowed. The command may itself contain colons; the
/// duration comes after the last one.
pub fn parse_script(text: &str) -> Result<CommandScript> {
    let mut commands = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let (cmd, dur) = line.rsplit_once(':').ok_or(Error::Parse {
            line: lineno,
            msg: "expected `<command>: <duration in seconds>`".into(),
        })?;
        let cmd = cmd.trim();
        if cmd.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty command text".into(),
            });
        }
        let duration: f64 = dur.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid duration `{}`", dur.trim()),
        })?;
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::validation(format!(
                "line {lineno}: duration must be positive and finite"
            )));
        }
        commands.push(Command {
            text: cmd.to_owned(),
            duration,
        });
    }
    Ok(CommandScript { commands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normalization_contract() {
        let a = embed_text("walk forward").unwrap();
        let b = embed_text("walk  FORWARD.").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let a = embed_text("a person walks forward").unwrap();
        let b = embed_text("a person walks forward").unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.as_vector().norm(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(similarity(&a, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn token_order_is_irrelevant() {
        let a = embed_text("forward walk").unwrap();
        let b = embed_text("walk forward").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_phrasings_are_closer_than_unrelated_ones() {
        let forward = embed_text("a person walks forward").unwrap();
        let ahead = embed_text("a person walks ahead").unwrap();
        let clap = embed_text("clap hands").unwrap();
        assert!(similarity(&forward, &ahead) > similarity(&forward, &clap));
    }

    #[test]
    fn similarity_identities() {
        let v = embed_text("wave the right hand").unwrap();
        assert_relative_eq!(similarity(&v, &v), 1.0, epsilon = 1e-12);
        let neg = TextEmbedding(-v.as_vector().clone());
        assert_relative_eq!(similarity(&v, &neg), -1.0, epsilon = 1e-12);

        let a = embed_text("run in a circle").unwrap();
        let b = embed_text("squat down slowly").unwrap();
        assert_eq!(similarity(&a, &b), similarity(&b, &a));
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(embed_text("").is_err());
        assert!(embed_text("  .,  ").is_err());
    }

    #[test]
    fn parses_timed_command_lines() {
        let script = parse_script(
            "A person walks forward briskly then stops: 4.0\nA man waves his right hand: 5.0\n",
        )
        .unwrap();
        assert_eq!(script.commands.len(), 2);
        assert_eq!(
            script.commands[0].text,
            "A person walks forward briskly then stops"
        );
        assert_eq!(script.commands[0].duration, 4.0);
        assert_eq!(script.commands[1].text, "A man waves his right hand");
        assert_eq!(script.commands[1].duration, 5.0);
        assert_relative_eq!(script.total_duration(), 9.0);
    }

    #[test]
    fn single_line_and_empty_scripts() {
        let one = parse_script("A man waves his right hand: 5.0").unwrap();
        assert_eq!(one.commands.len(), 1);
        assert_eq!(one.commands[0].duration, 5.0);

        assert!(parse_script("").unwrap().commands.is_empty());
        assert!(parse_script("# just a comment\n\n").unwrap().commands.is_empty());
    }

    #[test]
    fn rejects_bad_lines() {
        let err = parse_script("walk forward 3.0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));

        let err = parse_script("# ok\nwave: abc").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));

        let err = parse_script("wave: -1").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let err = parse_script("wave: 0").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn commands_may_contain_colons() {
        let script = parse_script("say: hello there: 2.5").unwrap();
        assert_eq!(script.commands[0].text, "say: hello there");
        assert_eq!(script.commands[0].duration, 2.5);
    }
}
