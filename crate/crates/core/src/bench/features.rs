//! Synthetic modality features and the feature-file format.
//!
//! Token files start with `#dims <d> <max_tokens>` followed by
//! `entity_id<TAB>v1,v2,...` lines holding `k·d` row-major values with
//! `1 ≤ k ≤ max_tokens`. Pooled files use the same layout with one vector.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{EntityId, ModalityStore};
use crate::numerics::Tensor;
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthFeatureConfig {
    pub d_v: usize,
    pub d_w: usize,
    /// Maximum visual tokens per entity.
    pub m: usize,
    /// Maximum text tokens per entity.
    pub n: usize,
    pub coverage_visual: f64,
    pub coverage_text: f64,
    /// Spread of entity centres around their community mean.
    pub entity_noise: f64,
    /// Spread of tokens around their entity centre.
    pub token_noise: f64,
}

impl Default for SynthFeatureConfig {
    fn default() -> Self {
        SynthFeatureConfig {
            d_v: 16,
            d_w: 16,
            m: 4,
            n: 8,
            coverage_visual: 0.9,
            coverage_text: 0.9,
            entity_noise: 0.5,
            token_noise: 0.5,
        }
    }
}

impl SynthFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.coverage_visual) || !unit(self.coverage_text) {
            return Err(Error::InvalidArgument("feature coverage must lie in [0, 1]".into()));
        }
        if self.d_v == 0 || self.d_w == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument(
                "feature dims and token counts must be ≥ 1".into(),
            ));
        }
        if !(self.entity_noise >= 0.0 && self.token_noise >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be ≥ 0".into()));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Community-correlated tokens: every entity centre is its community mean plus
/// noise, tokens scatter around the centre. Token counts are drawn from
/// `⌈max/2⌉..=max`. `community[e]` gives the community of entity `e`.
pub fn synth_features(community: &[usize], cfg: &SynthFeatureConfig, rng_seed: u64) -> Result<ModalityStore> {
    cfg.validate()?;
    let mut store = ModalityStore::new(cfg.d_v, cfg.d_w);
    let groups = community.iter().copied().max().map_or(0, |m| m + 1);
    let means = |tag: &str, d: usize| -> Vec<Vec<f64>> {
        (0..groups)
            .map(|c| normal_vec(&mut seed::rng(rng_seed, tag, c as u64), d, 1.0))
            .collect()
    };
    let vis_means = means("features.visual.mean", cfg.d_v);
    let txt_means = means("features.text.mean", cfg.d_w);
    for (e, &c) in community.iter().enumerate() {
        let mut rng = seed::rng(rng_seed, "features.entity", e as u64);
        for (visual, means, d, max, cov) in [
            (true, &vis_means, cfg.d_v, cfg.m, cfg.coverage_visual),
            (false, &txt_means, cfg.d_w, cfg.n, cfg.coverage_text),
        ] {
            let present = rng.gen::<f64>() < cov;
            let k = rng.gen_range(max.div_ceil(2)..=max);
            let centre: Vec<f64> = means[c]
                .iter()
                .zip(normal_vec(&mut rng, d, cfg.entity_noise))
                .map(|(m, z)| m + z)
                .collect();
            let mut data = Vec::with_capacity(k * d);
            for _ in 0..k {
                let z = normal_vec(&mut rng, d, cfg.token_noise);
                data.extend(centre.iter().zip(z).map(|(a, b)| a + b));
            }
            if !present {
                continue;
            }
            let tokens = Tensor::matrix(k, d, data)?;
            if visual {
                store.set_visual(e as EntityId, tokens, None)?;
            } else {
                store.set_text(e as EntityId, tokens, None)?;
            }
        }
    }
    Ok(store)
}

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s
}

/// Renders one modality of `store` (tokens and pooled vectors) as file text.
/// `labels[e]` is the id written for entity `e`.
pub fn render_features(
    store: &ModalityStore,
    entity_count: usize,
    visual: bool,
    labels: Option<&[String]>,
) -> (String, String) {
    let d = if visual { store.d_v() } else { store.d_w() };
    let get = |e: EntityId| if visual { store.visual(e) } else { store.text(e) };
    let max = (0..entity_count as EntityId)
        .filter_map(|e| get(e).map(|m| m.tokens.rows()))
        .max()
        .unwrap_or(1);
    let mut tokens = format!("#dims {d} {max}\n");
    let mut pooled = format!("#dims {d} 1\n");
    for e in 0..entity_count as EntityId {
        if let Some(m) = get(e) {
            let label = labels.map_or(e.to_string(), |l| l[e as usize].clone());
            writeln!(tokens, "{label}\t{}", join(m.tokens.data())).unwrap();
            writeln!(pooled, "{label}\t{}", join(&m.pooled)).unwrap();
        }
    }
    (tokens, pooled)
}

/// Parsed feature file: dims, max tokens and `(label, values)` rows.
struct FeatureFile {
    d: usize,
    max: usize,
    rows: Vec<(String, Vec<f64>, usize)>,
}

fn parse_features(path: &Path) -> Result<FeatureFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(FeatureFile {
            d: 0,
            max: 0,
            rows: Vec::new(),
        });
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    let dims = || Error::parse(path, 1, "expected header '#dims <d> <tokens>'");
    if h.len() != 3 || h[0] != "#dims" {
        return Err(dims());
    }
    let d: usize = h[1].parse().map_err(|_| dims())?;
    let max: usize = h[2].parse().map_err(|_| dims())?;
    if d == 0 || max == 0 {
        return Err(dims());
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let (label, vals) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, n + 1, "expected '<entity><TAB><values>'"))?;
        let values: Vec<f64> = vals
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, n + 1, "malformed number"))?;
        if values.is_empty() || values.len() % d != 0 || values.len() / d > max {
            return Err(Error::parse(
                path,
                n + 1,
                format!("{} values is not k·{d} with 1 ≤ k ≤ {max}", values.len()),
            ));
        }
        rows.push((label.trim().to_string(), values, n + 1));
    }
    Ok(FeatureFile { d, max, rows })
}

/// Reads visual and text token files (and optional pooled files) into a store.
/// `ids` maps file labels to entity ids; without it labels must be numeric ids
/// below `entity_count`. Entities absent from a file are absent in that modality.
#[allow(clippy::too_many_arguments)]
pub fn ingest_features(
    visual: Option<&Path>,
    text: Option<&Path>,
    visual_pooled: Option<&Path>,
    text_pooled: Option<&Path>,
    d_v: usize,
    d_w: usize,
    entity_count: usize,
    ids: Option<&HashMap<String, EntityId>>,
) -> Result<ModalityStore> {
    let mut store = ModalityStore::new(d_v, d_w);
    let resolve = |label: &str, path: &Path, line: usize| -> Result<EntityId> {
        let id = match ids {
            Some(m) => m.get(label).copied(),
            None => label.parse::<EntityId>().ok(),
        };
        match id {
            Some(e) if (e as usize) < entity_count => Ok(e),
            _ => Err(Error::parse(path, line, format!("unknown entity '{label}'"))),
        }
    };
    for (is_visual, tokens, pooled, want) in [(true, visual, visual_pooled, d_v), (false, text, text_pooled, d_w)] {
        let Some(tp) = tokens else { continue };
        let f = parse_features(tp)?;
        if f.rows.is_empty() {
            continue;
        }
        if f.d != want {
            return Err(Error::Shape(format!(
                "{} declares d={} but the model expects {want}",
                tp.display(),
                f.d
            )));
        }
        let mut pooled_map: HashMap<EntityId, Vec<f64>> = HashMap::new();
        if let Some(pp) = pooled {
            let pf = parse_features(pp)?;
            if !pf.rows.is_empty() && (pf.d != want || pf.max != 1) {
                return Err(Error::Shape(format!(
                    "{} must hold one {want}-vector per entity",
                    pp.display()
                )));
            }
            for (label, v, line) in pf.rows {
                pooled_map.insert(resolve(&label, pp, line)?, v);
            }
        }
        for (label, v, line) in f.rows {
            let e = resolve(&label, tp, line)?;
            let k = v.len() / want;
            let t = Tensor::matrix(k, want, v)?;
            let p = pooled_map.remove(&e);
            if is_visual {
                store.set_visual(e, t, p)?;
            } else {
                store.set_text(e, t, p)?;
            }
        }
    }
    Ok(store)
}

/// Writes `visual.tsv`, `text.tsv` and the pooled files into `dir`.
pub fn write_features(dir: &Path, store: &ModalityStore, entity_count: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (visual, name) in [(true, "visual"), (false, "text")] {
        let (t, p) = render_features(store, entity_count, visual, None);
        let tp = dir.join(format!("{name}.tsv"));
        fs::write(&tp, t).map_err(|e| Error::io(&tp, e))?;
        let pp = dir.join(format!("{name}_pooled.tsv"));
        fs::write(&pp, p).map_err(|e| Error::io(&pp, e))?;
    }
    Ok(())
}

/// Reads the store written by [`write_features`].
pub fn read_features(dir: &Path, d_v: usize, d_w: usize, entity_count: usize) -> Result<ModalityStore> {
    let p = |n: &str| dir.join(n);
    ingest_features(
        Some(&p("visual.tsv")),
        Some(&p("text.tsv")),
        Some(&p("visual_pooled.tsv")),
        Some(&p("text_pooled.tsv")),
        d_v,
        d_w,
        entity_count,
        None,
    )
}
