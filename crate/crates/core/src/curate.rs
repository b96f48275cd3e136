//! Init-image selection in a joint vision-text embedding space, prompt
//! refinement through an optional VLM, and generation-job emission.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::checkpoint::read_json;
use crate::config::{guidance, ProfileName};
use crate::error::{Error, Result};
use crate::io::{read_tensor, GenerationJob};

/// Unit-norm tolerance for stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    /// Images: a unique id. Texts: the exact query string that was encoded.
    pub id: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub scene_id: Option<String>,
    pub source_path: String,
}

/// One record as listed in an index file; the vector lives in a PAVF file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub kind: EmbeddingKind,
    /// PAVF file relative to the index.
    pub file: String,
    /// Row within a rank-2 tensor; ignored for rank 1.
    #[serde(default)]
    pub row: usize,
    #[serde(default)]
    pub scene_id: Option<String>,
    pub source_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexFile {
    pub entries: Vec<IndexEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct EmbeddingIndex {
    pub records: Vec<EmbeddingRecord>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EmbeddingIndex {
    /// Checks unit norms, a single dimension, unique ids per kind and scene ids on images.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let dim = records.first().map(|r| r.vector.len());
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if Some(r.vector.len()) != dim || r.vector.is_empty() {
                return Err(Error::Manifest {
                    index: i,
                    reason: format!("{}: dimension {} differs from {:?}", r.id, r.vector.len(), dim),
                });
            }
            let n = norm(&r.vector);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Manifest {
                    index: i,
                    reason: format!("{}: norm {n} is not 1 within {UNIT_NORM_TOL}", r.id),
                });
            }
            if r.kind == EmbeddingKind::Image && r.scene_id.is_none() {
                return Err(Error::Manifest {
                    index: i,
                    reason: format!("image {} has no scene_id", r.id),
                });
            }
            if !seen.insert((r.kind, r.id.as_str())) {
                return Err(Error::Manifest {
                    index: i,
                    reason: format!("duplicate {:?} id {:?}", r.kind, r.id),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file: IndexFile = read_json(path)?;
        let mut cache: HashMap<String, crate::io::PavfTensor> = HashMap::new();
        let mut records = Vec::with_capacity(file.entries.len());
        for (i, e) in file.entries.into_iter().enumerate() {
            if !cache.contains_key(&e.file) {
                let p = base.join(&e.file);
                cache.insert(e.file.clone(), read_tensor(p)?);
            }
            let t = &cache[&e.file];
            let vector: Vec<f64> = if t.shape().len() == 1 {
                t.to_f64()
            } else if e.row < t.rows() {
                t.row(e.row).iter().map(|&x| x as f64).collect()
            } else {
                return Err(Error::Manifest {
                    index: i,
                    reason: format!("row {} outside {} rows of {}", e.row, t.rows(), e.file),
                });
            };
            records.push(EmbeddingRecord {
                id: e.id,
                kind: e.kind,
                vector,
                scene_id: e.scene_id,
                source_path: e.source_path,
            });
        }
        Self::new(records)
    }

    pub fn images(&self) -> Vec<&EmbeddingRecord> {
        self.records.iter().filter(|r| r.kind == EmbeddingKind::Image).collect()
    }

    pub fn text(&self, query: &str) -> Result<&EmbeddingRecord> {
        self.records
            .iter()
            .find(|r| r.kind == EmbeddingKind::Text && r.id == query)
            .ok_or_else(|| Error::MissingEmbedding(query.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub class_name: String,
    #[serde(default)]
    pub positive_phrases: Vec<String>,
    #[serde(default)]
    pub negative_phrases: Vec<String>,
    pub lambda: f64,
    pub top_k: usize,
    #[serde(default)]
    pub template_phrases: Vec<String>,
    #[serde(default = "default_instruction")]
    pub refinement_instruction: String,
}

pub fn default_instruction() -> String {
    "You are an expert in visual scene understanding and anomaly-behavior design. \
Given an input image and an anomaly category, describe the most plausible abnormal behavior \
consistent with both the scene and the category. Your output must be a single short sentence \
completing the pattern \"Generate {class} behavior, manifested as ...\". Use only elements clearly \
visible in the image. Do not invent unseen objects, persons, weapons, or motions. Keep the action \
realistic, scene-grounded, and visually justified. Camera motion is strictly prohibited."
        .to_string()
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_name.trim().is_empty() {
            return Err(Error::Config("class_name must be non-empty".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config(format!("{}: top_k must be ≥ 1", self.class_name)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("{}: lambda must lie in [0, 1]", self.class_name)));
        }
        Ok(())
    }

    /// The positive query: class name followed by positive phrases.
    pub fn positive_query(&self) -> String {
        std::iter::once(self.class_name.as_str())
            .chain(self.positive_phrases.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn instruction(&self) -> String {
        let ins = &self.refinement_instruction;
        if ins.contains("{class}") {
            ins.replace("{class}", &self.class_name)
        } else {
            format!("{ins}\nAnomaly category: {}", self.class_name)
        }
    }
}

pub fn read_class_specs(path: impl AsRef<Path>) -> Result<Vec<ClassSpec>> {
    let specs: Vec<ClassSpec> = read_json(path)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub min_quota_per_scene: usize,
    pub enabled: bool,
    /// Multiplier on `count(s)^α`; `None` uses `min_s count(s)^(1−α)`.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl BalanceConfig {
    pub fn disabled() -> Self {
        Self {
            alpha: 1.0,
            min_quota_per_scene: 0,
            enabled: false,
            scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and ≥ 0, got {}",
                self.alpha
            )));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `⟨v̂, t̂⟩ − λ·max_n ⟨v̂, n̂⟩`; the negative term is 0 when there are no negatives.
pub fn score_image(img: &[f64], pos: &[f64], negs: &[&[f64]], lambda: f64) -> Result<f64> {
    for v in std::iter::once(pos).chain(negs.iter().copied()) {
        if v.len() != img.len() {
            return Err(Error::shape(
                "score_image",
                format!("image has dimension {}, text has {}", img.len(), v.len()),
            ));
        }
    }
    let neg = negs
        .iter()
        .map(|n| dot(img, n))
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    Ok(dot(img, pos) - lambda * neg.unwrap_or(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
    pub scene_id: String,
    pub source_path: String,
}

/// Score descending, id ascending.
fn rank_order(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

pub fn score_images(index: &EmbeddingIndex, spec: &ClassSpec) -> Result<Vec<Scored>> {
    let pos = index.text(&spec.positive_query())?;
    let negs = spec
        .negative_phrases
        .iter()
        .map(|n| index.text(n).map(|r| r.vector.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    index
        .images()
        .into_iter()
        .map(|img| {
            Ok(Scored {
                id: img.id.clone(),
                score: score_image(&img.vector, &pos.vector, &negs, spec.lambda)?,
                scene_id: img.scene_id.clone().unwrap_or_default(),
                source_path: img.source_path.clone(),
            })
        })
        .collect()
}

/// Candidates kept per scene: `min(n_s, ⌈n_s^α · scale⌉)`.
pub fn scene_caps(counts: &BTreeMap<String, usize>, bal: &BalanceConfig) -> BTreeMap<String, usize> {
    let scale = bal.scale.unwrap_or_else(|| {
        counts
            .values()
            .map(|&n| (n as f64).powf(1.0 - bal.alpha))
            .fold(f64::INFINITY, f64::min)
    });
    counts
        .iter()
        .map(|(s, &n)| {
            // Rounding slack so exact integers are not pushed up by powf error.
            let cap = ((n as f64).powf(bal.alpha) * scale - 1e-9).ceil().max(1.0) as usize;
            (s.clone(), cap.min(n))
        })
        .collect()
}

/// Scene-balanced pool: each scene keeps its highest-scoring members up to its cap.
pub fn balanced_pool(scored: &[Scored], bal: &BalanceConfig) -> Vec<Scored> {
    let mut by_scene: BTreeMap<String, Vec<Scored>> = BTreeMap::new();
    for s in scored {
        by_scene.entry(s.scene_id.clone()).or_default().push(s.clone());
    }
    let counts = by_scene.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let caps = scene_caps(&counts, bal);
    by_scene
        .into_iter()
        .flat_map(|(scene, mut members)| {
            members.sort_by(rank_order);
            members.truncate(caps[&scene]);
            members
        })
        .collect()
}

/// Picks `min(K, pool)` images, sorted by score descending then id ascending.
pub fn select_from_scored(scored: &[Scored], top_k: usize, bal: &BalanceConfig) -> Result<Vec<Scored>> {
    bal.validate()?;
    if !bal.enabled {
        let mut all = scored.to_vec();
        all.sort_by(rank_order);
        all.truncate(top_k);
        return Ok(all);
    }
    let mut pool = balanced_pool(scored, bal);
    pool.sort_by(rank_order);
    let mut taken = vec![false; pool.len()];
    let mut per_scene: HashMap<&str, usize> = HashMap::new();
    let mut quota_picks = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        let c = per_scene.entry(s.scene_id.as_str()).or_default();
        if *c < bal.min_quota_per_scene {
            *c += 1;
            quota_picks.push(i);
        }
    }
    // Quota picks are already in global rank order; if they alone exceed K the best K survive.
    quota_picks.truncate(top_k);
    for &i in &quota_picks {
        taken[i] = true;
    }
    let mut remaining = top_k - quota_picks.len();
    for t in taken.iter_mut() {
        if remaining == 0 {
            break;
        }
        if !*t {
            *t = true;
            remaining -= 1;
        }
    }
    Ok(pool
        .into_iter()
        .zip(taken)
        .filter_map(|(s, t)| t.then_some(s))
        .collect())
}

pub fn select_topk(index: &EmbeddingIndex, spec: &ClassSpec, bal: &BalanceConfig) -> Result<Vec<Scored>> {
    spec.validate()?;
    let scored = score_images(index, spec)?;
    if scored.is_empty() {
        return Err(Error::InvalidArgument("no image embeddings in index".into()));
    }
    select_from_scored(&scored, spec.top_k, bal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub class_name: String,
    pub inits: Vec<Scored>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Vlm,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub class_name: String,
    pub init_id: String,
    pub phrase: String,
    pub full_prompt: String,
    pub provenance: Provenance,
}

pub trait VlmClient: Sync {
    /// Free-text description of `image` under `instruction`.
    fn describe(&self, image: &Path, instruction: &str) -> Result<String>;
}

pub fn fallback_phrase(class_name: &str) -> String {
    format!("Generate {class_name} behavior consistent with the scene")
}

/// First sentence of `text`, whitespace-collapsed, without its final period.
pub fn first_sentence(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut end = collapsed.len();
    let chars: Vec<(usize, char)> = collapsed.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?' | '。') && chars.get(k + 1).is_none_or(|&(_, n)| n == ' ') {
            end = i + c.len_utf8();
            break;
        }
    }
    let s = collapsed[..end].trim();
    s.strip_suffix('.')
        .or_else(|| s.strip_suffix('。'))
        .unwrap_or(s)
        .trim()
        .to_string()
}

pub fn compose_prompt(phrase: &str, templates: &[String]) -> String {
    std::iter::once(phrase)
        .chain(templates.iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub prompt: RefinedPrompt,
    pub warning: Option<String>,
}

pub fn refine_prompt(init_id: &str, image: &Path, spec: &ClassSpec, client: Option<&dyn VlmClient>) -> Refinement {
    let (phrase, provenance, warning) = match client.map(|c| c.describe(image, &spec.instruction())) {
        None => (fallback_phrase(&spec.class_name), Provenance::Fallback, None),
        Some(Ok(text)) => {
            let phrase = first_sentence(&text);
            if phrase.is_empty() {
                (
                    fallback_phrase(&spec.class_name),
                    Provenance::Fallback,
                    Some(format!("{init_id}: VLM returned an empty response")),
                )
            } else {
                (phrase, Provenance::Vlm, None)
            }
        }
        Some(Err(e)) => (
            fallback_phrase(&spec.class_name),
            Provenance::Fallback,
            Some(format!("{init_id}: VLM request failed, using fallback: {e}")),
        ),
    };
    Refinement {
        prompt: RefinedPrompt {
            class_name: spec.class_name.clone(),
            init_id: init_id.to_string(),
            full_prompt: compose_prompt(&phrase, &spec.template_phrases),
            phrase,
            provenance,
        },
        warning,
    }
}

/// Refines every init of `sel` with at most `max_in_flight` concurrent requests.
/// Output follows the order of `sel.inits`.
pub fn refine_selection(
    sel: &Selection,
    spec: &ClassSpec,
    client: Option<&dyn VlmClient>,
    max_in_flight: usize,
) -> Vec<Refinement> {
    let cap = max_in_flight.max(1);
    let mut out = Vec::with_capacity(sel.inits.len());
    for chunk in sel.inits.chunks(cap) {
        thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|init| s.spawn(move || refine_prompt(&init.id, Path::new(&init.source_path), spec, client)))
                .collect();
            out.extend(
                handles
                    .into_iter()
                    .map(|h| h.join().expect("refinement worker panicked")),
            );
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationDefaults {
    pub resolution: (u32, u32),
    pub frame_count: u32,
    pub fps: u32,
    pub sampling_steps: u32,
    pub guidance: (f64, f64),
}

impl GenerationDefaults {
    pub fn for_profile(profile: ProfileName) -> Self {
        Self {
            resolution: (832, 480),
            frame_count: 81,
            fps: 16,
            sampling_steps: 25,
            guidance: guidance(profile),
        }
    }
}

/// One job per selected init, in selection order.
pub fn emit_generation_manifest(
    selections: &[Selection],
    prompts: &[RefinedPrompt],
    defaults: &GenerationDefaults,
) -> Result<Vec<GenerationJob>> {
    let n: usize = selections.iter().map(|s| s.inits.len()).sum();
    if n != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} selected inits but {} refined prompts",
            prompts.len()
        )));
    }
    let by_key: HashMap<(&str, &str), &RefinedPrompt> = prompts
        .iter()
        .map(|p| ((p.class_name.as_str(), p.init_id.as_str()), p))
        .collect();
    let mut jobs = Vec::with_capacity(n);
    for sel in selections {
        for init in &sel.inits {
            let p = by_key
                .get(&(sel.class_name.as_str(), init.id.as_str()))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no refined prompt for {} / {}", sel.class_name, init.id))
                })?;
            let job = GenerationJob {
                class_name: sel.class_name.clone(),
                init_image_path: init.source_path.clone(),
                prompt: p.full_prompt.clone(),
                resolution: defaults.resolution,
                frame_count: defaults.frame_count,
                fps: defaults.fps,
                sampling_steps: defaults.sampling_steps,
                guidance: defaults.guidance,
            };
            job.validate()?;
            jobs.push(job);
        }
    }
    Ok(jobs)
}

#[cfg(feature = "http")]
pub use http::HttpVlmClient;

#[cfg(feature = "http")]
mod http {
    use std::path::Path;
    use std::time::Duration;

    use base64::Engine;
    use serde_json::{json, Value};

    use super::VlmClient;
    use crate::error::{Error, Result};

    pub const URL_VAR: &str = "PAVAD_VLM_URL";
    pub const KEY_VAR: &str = "PAVAD_VLM_KEY";

    /// Chat-completions client sending one text part and one base64 image part.
    #[derive(Clone, Debug)]
    pub struct HttpVlmClient {
        pub url: String,
        pub key: Option<String>,
        pub model: String,
        pub timeout: Duration,
    }

    impl HttpVlmClient {
        /// `None` when `PAVAD_VLM_URL` is unset or empty.
        pub fn from_env(model: &str, timeout: Duration) -> Option<Self> {
            let url = std::env::var(URL_VAR).ok().filter(|u| !u.is_empty())?;
            Some(Self {
                url,
                key: std::env::var(KEY_VAR).ok().filter(|k| !k.is_empty()),
                model: model.to_string(),
                timeout,
            })
        }

        pub fn request_body(&self, image: &Path, instruction: &str) -> Result<Value> {
            let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
            let mime = match image
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                Some("png") => "image/png",
                Some("webp") => "image/webp",
                _ => "image/jpeg",
            };
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(json!({
                "model": self.model,
                "messages": [{
                    "role": "user",
                    "content": [
                        {"type": "text", "text": instruction},
                        {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}
                    ]
                }]
            }))
        }
    }

    impl VlmClient for HttpVlmClient {
        fn describe(&self, image: &Path, instruction: &str) -> Result<String> {
            let body = self.request_body(image, instruction)?;
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(self.timeout))
                .build()
                .into();
            let mut req = agent.post(&self.url);
            if let Some(k) = &self.key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = req.send_json(&body).map_err(|e| Error::Vlm(e.to_string()))?;
            let v: Value = resp.body_mut().read_json().map_err(|e| Error::Vlm(e.to_string()))?;
            let content = &v["choices"][0]["message"]["content"];
            match content {
                Value::String(s) => Ok(s.clone()),
                Value::Array(parts) => Ok(parts
                    .iter()
                    .filter_map(|p| p["text"].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")),
                _ => Err(Error::Vlm("response has no choices[0].message.content".into())),
            }
        }
    }
}

/// Resolves `path` against `base` unless absolute.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, score: f64, scene: &str) -> Scored {
        Scored {
            id: id.into(),
            score,
            scene_id: scene.into(),
            source_path: format!("{id}.jpg"),
        }
    }

    #[test]
    fn hand_scores() {
        assert_eq!(score_image(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 0.5).unwrap(), 1.0);
        let v = score_image(&[0.6, 0.8], &[1.0, 0.0], &[&[0.0, 1.0]], 1.0).unwrap();
        assert!((v + 0.2).abs() < 1e-15);
        assert_eq!(score_image(&[0.6, 0.8], &[1.0, 0.0], &[], 1.0).unwrap(), 0.6);
        assert!(score_image(&[1.0], &[1.0, 0.0], &[], 0.0).is_err());
    }

    #[test]
    fn direct_ranking_when_unbalanced() {
        let pool = [s("c", 0.1, "x"), s("a", 0.9, "x"), s("b", 0.5, "y")];
        let out = select_from_scored(&pool, 2, &BalanceConfig::disabled()).unwrap();
        assert_eq!(out.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn alpha_zero_equalizes_scenes() {
        let counts: BTreeMap<String, usize> = [("a".to_string(), 9), ("b".to_string(), 4), ("c".to_string(), 2)].into();
        let bal = BalanceConfig {
            alpha: 0.0,
            min_quota_per_scene: 0,
            enabled: true,
            scale: None,
        };
        assert!(scene_caps(&counts, &bal).values().all(|&c| c == 2));
        let bal1 = BalanceConfig { alpha: 1.0, ..bal };
        assert_eq!(scene_caps(&counts, &bal1), counts);
    }

    #[test]
    fn quota_guarantees_each_scene() {
        let pool = [
            s("a1", 0.9, "a"),
            s("a2", 0.8, "a"),
            s("a3", 0.7, "a"),
            s("b1", 0.2, "b"),
            s("c1", 0.1, "c"),
        ];
        let bal = BalanceConfig {
            alpha: 1.0,
            min_quota_per_scene: 1,
            enabled: true,
            scale: None,
        };
        let out = select_from_scored(&pool, 4, &bal).unwrap();
        let ids: Vec<_> = out.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["a1", "a2", "b1", "c1"]);
    }

    #[test]
    fn sentence_truncation() {
        assert_eq!(
            first_sentence("Generate a fight. Then more.\nExtra"),
            "Generate a fight"
        );
        assert_eq!(first_sentence("  Generate 3.5 m jump  "), "Generate 3.5 m jump");
        assert_eq!(first_sentence("No period here"), "No period here");
        assert_eq!(first_sentence("   "), "");
    }

    #[test]
    fn fallback_prompt_is_deterministic() {
        let spec = ClassSpec {
            class_name: "explosion".into(),
            positive_phrases: vec![],
            negative_phrases: vec![],
            lambda: 0.5,
            top_k: 1,
            template_phrases: vec!["natural movement".into(), "fixed camera".into()],
            refinement_instruction: default_instruction(),
        };
        let r = refine_prompt("i0", Path::new("x.jpg"), &spec, None);
        assert_eq!(
            r.prompt.full_prompt,
            "Generate explosion behavior consistent with the scene, natural movement, fixed camera"
        );
        assert_eq!(r.prompt.provenance, Provenance::Fallback);
        assert!(r.warning.is_none());
        assert!(spec
            .instruction()
            .contains("Generate explosion behavior, manifested as"));
    }
}
