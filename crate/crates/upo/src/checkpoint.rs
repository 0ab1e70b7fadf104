//! Plain-text scorer checkpoints.
//!
//! ```text
//! upo-scorer v1
//! input_dim 9
//! hidden 32
//! feature_k 5
//! mode topk-restricted 3
//! values 705
//! 0.0123
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use upo_core::policy::{LearnedPolicy, PolicyMode, ScorerParams};

const MAGIC: &str = "upo-scorer v1";

pub fn to_text(policy: &LearnedPolicy) -> String {
    let p = &policy.params;
    let mut s = String::new();
    writeln!(s, "{MAGIC}").unwrap();
    writeln!(s, "input_dim {}", p.input_dim()).unwrap();
    writeln!(s, "hidden {}", p.hidden()).unwrap();
    writeln!(s, "feature_k {}", policy.feature_k).unwrap();
    match policy.mode {
        PolicyMode::FullSoftmax => writeln!(s, "mode full-softmax").unwrap(),
        PolicyMode::TopkRestricted { k } => writeln!(s, "mode topk-restricted {k}").unwrap(),
    }
    writeln!(s, "values {}", p.len()).unwrap();
    for v in p.values() {
        writeln!(s, "{v}").unwrap();
    }
    s
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> anyhow::Result<&'a str> {
    let line = lines.next().ok_or_else(|| anyhow!("checkpoint ends before {name}"))?;
    line.strip_prefix(name)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| anyhow!("expected `{name} ...`, found {line:?}"))
}

pub fn from_text(text: &str) -> anyhow::Result<LearnedPolicy> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        bail!("not a {MAGIC} checkpoint");
    }
    let input_dim: usize = field(&mut lines, "input_dim")?.parse()?;
    let hidden: usize = field(&mut lines, "hidden")?.parse()?;
    let feature_k: usize = field(&mut lines, "feature_k")?.parse()?;
    let mode = match field(&mut lines, "mode")? {
        "full-softmax" => PolicyMode::FullSoftmax,
        m => match m.split_once(' ') {
            Some(("topk-restricted", k)) => PolicyMode::TopkRestricted { k: k.parse()? },
            _ => bail!("unknown mode {m:?}"),
        },
    };
    let n: usize = field(&mut lines, "values")?.parse()?;
    let values = lines
        .by_ref()
        .take(n)
        .map(|l| l.trim().parse::<f64>().with_context(|| format!("bad value {l:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if values.len() != n {
        bail!("checkpoint declares {n} values, holds {}", values.len());
    }
    if lines.any(|l| !l.trim().is_empty()) {
        bail!("trailing data after {n} values");
    }
    let params = ScorerParams::from_values(input_dim, hidden, values)?;
    Ok(LearnedPolicy::new(params, mode, feature_k)?)
}

pub fn save(path: &Path, policy: &LearnedPolicy) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_text(policy)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<LearnedPolicy> {
    let text = std::fs::read_to_string(path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    from_text(&text).with_context(|| format!("reading checkpoint {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use upo_core::policy::{FeatureVector, Init};
    use upo_core::stream_rng;

    #[test]
    fn round_trip_is_exact() {
        for mode in [PolicyMode::FullSoftmax, PolicyMode::TopkRestricted { k: 3 }] {
            let p = ScorerParams::init(FeatureVector::dim(5), 4, Init::Uniform, &mut stream_rng(1, 2));
            let pol = LearnedPolicy::new(p, mode, 5).unwrap();
            assert_eq!(from_text(&to_text(&pol)).unwrap(), pol);
        }
    }

    #[test]
    fn malformed_checkpoints_fail() {
        let p = ScorerParams::zeros(FeatureVector::dim(2), 2);
        let n = p.len();
        let text = to_text(&LearnedPolicy::new(p, PolicyMode::FullSoftmax, 2).unwrap());
        assert!(from_text(&text.replace("v1", "v2")).is_err());
        assert!(from_text(&text.replace(&format!("values {n}"), &format!("values {}", n + 1))).is_err());
        assert!(from_text(&format!("{text}1.0\n")).is_err());
        assert!(from_text(&text.replace("hidden 2", "hidden 3")).is_err());
        assert!(from_text(&text.replace("full-softmax", "bogus")).is_err());
    }
}
