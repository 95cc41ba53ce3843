//! Prompt grammar: enumeration, hybrid construction, and seeded batch sampling
//! over the four prompt families (live / spoof / content / hybrid).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four prompt families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Live,
    Spoof,
    Content,
    Hybrid,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Live => "live",
            Family::Spoof => "spoof",
            Family::Content => "content",
            Family::Hybrid => "hybrid",
        }
    }
}

/// Closed set of position adjectives an occluding object can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Upper,
    Lower,
    Left,
    Right,
    Center,
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
    Whole,
}

impl Position {
    pub const ALL: [Position; 10] = [
        Position::Upper,
        Position::Lower,
        Position::Left,
        Position::Right,
        Position::Center,
        Position::UpperLeft,
        Position::UpperRight,
        Position::LowerLeft,
        Position::LowerRight,
        Position::Whole,
    ];

    /// English form used inside prompt text.
    pub fn as_text(self) -> &'static str {
        match self {
            Position::Upper => "upper",
            Position::Lower => "lower",
            Position::Left => "left",
            Position::Right => "right",
            Position::Center => "center",
            Position::UpperLeft => "upper left",
            Position::UpperRight => "upper right",
            Position::LowerLeft => "lower left",
            Position::LowerRight => "lower right",
            Position::Whole => "whole",
        }
    }

    pub fn from_text(s: &str) -> Result<Position> {
        Position::ALL
            .into_iter()
            .find(|p| p.as_text() == s)
            .ok_or_else(|| Error::Argument(format!("unknown position adjective {s:?}")))
    }
}

/// A prompt with its structured slot bindings. `text` is exactly the family
/// template with the slots substituted; [`parse_prompt`] recovers the bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub family: Family,
    pub text: String,
    pub spoof_adjective: Option<String>,
    pub position: Option<Position>,
    pub occluding_object: Option<String>,
    pub live_adjective: Option<String>,
}

impl Prompt {
    pub fn live(adj: &str) -> Prompt {
        Prompt {
            family: Family::Live,
            text: format!("This is a {adj} face."),
            spoof_adjective: None,
            position: None,
            occluding_object: None,
            live_adjective: Some(adj.to_string()),
        }
    }

    pub fn spoof(sa: &str, pa: Position, oo: &str) -> Prompt {
        Prompt {
            family: Family::Spoof,
            text: format!(
                "This is a {sa} face modified by covering the {} part with a {oo}.",
                pa.as_text()
            ),
            spoof_adjective: Some(sa.to_string()),
            position: Some(pa),
            occluding_object: Some(oo.to_string()),
            live_adjective: None,
        }
    }

    pub fn content(word: &str) -> Prompt {
        Prompt {
            family: Family::Content,
            text: format!("This is a {word} image."),
            spoof_adjective: None,
            position: None,
            occluding_object: None,
            live_adjective: None,
        }
    }

    /// Tab-separated dump line: `family<TAB>text<TAB>bindings-as-key=value`.
    pub fn dump_line(&self) -> String {
        let mut bindings = Vec::new();
        if let Some(sa) = &self.spoof_adjective {
            bindings.push(format!("sa={sa}"));
        }
        if let Some(pa) = self.position {
            bindings.push(format!("pa={}", pa.as_text()));
        }
        if let Some(oo) = &self.occluding_object {
            bindings.push(format!("oo={oo}"));
        }
        if let Some(la) = &self.live_adjective {
            bindings.push(format!("la={la}"));
        }
        format!("{}\t{}\t{}", self.family.as_str(), self.text, bindings.join(";"))
    }
}

/// Word lists backing each placeholder slot. All lists are config-overridable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VocabConfig {
    pub live_adjectives: Vec<String>,
    pub spoof_adjectives: Vec<String>,
    pub occluding_objects: Vec<String>,
    pub content_words: Vec<String>,
    pub positions: Vec<Position>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        let v = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        VocabConfig {
            live_adjectives: v(&["live", "real", "genuine", "bonafide"]),
            spoof_adjectives: v(&["spoof", "fake", "forged", "counterfeit"]),
            occluding_objects: v(&["mask", "photo", "paper", "screen"]),
            content_words: v(&["face", "facial", "portrait"]),
            positions: Position::ALL.to_vec(),
        }
    }
}

impl VocabConfig {
    fn slot(&self, name: &str, words: &[String]) -> Result<Vec<String>> {
        if words.is_empty() {
            return Err(Error::Config(format!("empty vocabulary for slot {name:?}")));
        }
        let mut out = words.to_vec();
        out.sort();
        out.dedup();
        Ok(out)
    }

    fn positions_sorted(&self) -> Result<Vec<Position>> {
        if self.positions.is_empty() {
            return Err(Error::Config("empty vocabulary for slot \"positions\"".into()));
        }
        let mut out = self.positions.clone();
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Every word that can appear in a generated prompt, for tokenizer vocabularies.
    pub fn all_words(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for w in self
            .live_adjectives
            .iter()
            .chain(self.spoof_adjectives.iter())
            .chain(self.occluding_objects.iter())
            .chain(self.content_words.iter())
        {
            words.push(w.clone());
        }
        for p in &self.positions {
            for part in p.as_text().split_whitespace() {
                words.push(part.to_string());
            }
        }
        words.sort();
        words.dedup();
        words
    }
}

/// Cartesian expansion of one family's template over its slots, in
/// lexicographic slot order. The hybrid family expands over all four slots.
pub fn enumerate_prompts(family: Family, vocab: &VocabConfig) -> Result<Vec<Prompt>> {
    let prompts = match family {
        Family::Live => vocab
            .slot("live_adjectives", &vocab.live_adjectives)?
            .iter()
            .map(|la| Prompt::live(la))
            .collect(),
        Family::Content => vocab
            .slot("content_words", &vocab.content_words)?
            .iter()
            .map(|w| Prompt::content(w))
            .collect(),
        Family::Spoof => {
            let sas = vocab.slot("spoof_adjectives", &vocab.spoof_adjectives)?;
            let oos = vocab.slot("occluding_objects", &vocab.occluding_objects)?;
            let pas = vocab.positions_sorted()?;
            let mut out = Vec::with_capacity(sas.len() * pas.len() * oos.len());
            for sa in &sas {
                for pa in &pas {
                    for oo in &oos {
                        out.push(Prompt::spoof(sa, *pa, oo));
                    }
                }
            }
            out
        }
        Family::Hybrid => {
            let live = enumerate_prompts(Family::Live, vocab)?;
            let spoof = enumerate_prompts(Family::Spoof, vocab)?;
            let mut out = Vec::with_capacity(live.len() * spoof.len());
            for l in &live {
                for s in &spoof {
                    out.push(build_hybrid(l, s)?);
                }
            }
            out
        }
    };
    Ok(prompts)
}

/// Builds a hybrid prompt: SA/PA/OO come from `spoof_p`, the live adjective
/// from `live_p`.
pub fn build_hybrid(live_p: &Prompt, spoof_p: &Prompt) -> Result<Prompt> {
    if live_p.family != Family::Live {
        return Err(Error::Argument(format!(
            "build_hybrid expects a live prompt, got {}",
            live_p.family.as_str()
        )));
    }
    if spoof_p.family != Family::Spoof {
        return Err(Error::Argument(format!(
            "build_hybrid expects a spoof prompt, got {}",
            spoof_p.family.as_str()
        )));
    }
    let sa = spoof_p.spoof_adjective.clone().unwrap();
    let pa = spoof_p.position.unwrap();
    let oo = spoof_p.occluding_object.clone().unwrap();
    let la = live_p.live_adjective.clone().unwrap();
    Ok(Prompt {
        text: format!(
            "This is a {sa} modified by covering the {} part of a {la} face with a {oo}.",
            pa.as_text()
        ),
        family: Family::Hybrid,
        spoof_adjective: Some(sa),
        position: Some(pa),
        occluding_object: Some(oo),
        live_adjective: Some(la),
    })
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<(&'a str, &'a str)> {
    let rest = text.strip_prefix(start)?;
    let idx = rest.find(end)?;
    Some((&rest[..idx], &rest[idx + end.len()..]))
}

/// Recovers the slot bindings from a generated prompt text (round trip of the
/// template substitution).
pub fn parse_prompt(text: &str) -> Result<Prompt> {
    let err = || Error::Argument(format!("text does not match any prompt template: {text:?}"));
    if text.contains(" face modified by covering the ") {
        // Spoof template.
        let (sa, rest) =
            between(text, "This is a ", " face modified by covering the ").ok_or_else(err)?;
        let (pa, rest) = {
            let idx = rest.find(" part with a ").ok_or_else(err)?;
            (&rest[..idx], &rest[idx + " part with a ".len()..])
        };
        let oo = rest.strip_suffix('.').ok_or_else(err)?;
        return Ok(Prompt::spoof(sa, Position::from_text(pa)?, oo));
    }
    if text.contains(" modified by covering the ") {
        // Hybrid template.
        let (sa, rest) = between(text, "This is a ", " modified by covering the ").ok_or_else(err)?;
        let idx = rest.find(" part of a ").ok_or_else(err)?;
        let pa = &rest[..idx];
        let rest = &rest[idx + " part of a ".len()..];
        let idx = rest.find(" face with a ").ok_or_else(err)?;
        let la = &rest[..idx];
        let oo = rest[idx + " face with a ".len()..].strip_suffix('.').ok_or_else(err)?;
        return build_hybrid(&Prompt::live(la), &Prompt::spoof(sa, Position::from_text(pa)?, oo));
    }
    if let Some((la, rest)) = between(text, "This is a ", " face.") {
        if rest.is_empty() {
            return Ok(Prompt::live(la));
        }
    }
    if let Some((w, rest)) = between(text, "This is a ", " image.") {
        if rest.is_empty() {
            return Ok(Prompt::content(w));
        }
    }
    Err(err())
}

/// One training batch of prompts. `pairing[k] = (i, j)` records that
/// `hybrid[k]` was built from `live[i]` and `spoof[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBatch {
    pub live: Vec<Prompt>,
    pub spoof: Vec<Prompt>,
    pub content: Vec<Prompt>,
    pub hybrid: Vec<Prompt>,
    pub pairing: Vec<(usize, usize)>,
}

impl PromptBatch {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.live.len(), self.spoof.len(), self.content.len())
    }
}

fn sample_without_replacement(
    prompts: &[Prompt],
    n: usize,
    rng: &mut ChaCha8Rng,
    family: Family,
) -> Result<Vec<Prompt>> {
    if n > prompts.len() {
        return Err(Error::Argument(format!(
            "requested {n} {} prompts but the enumeration has only {}",
            family.as_str(),
            prompts.len()
        )));
    }
    let mut idx: Vec<usize> = (0..prompts.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    Ok(idx.into_iter().map(|i| prompts[i].clone()).collect())
}

/// Uniform without-replacement sample from each family enumeration,
/// deterministic under `seed`. One hybrid is built per sampled spoof prompt,
/// paired with a live prompt round-robin.
pub fn sample_batch(
    seed: u64,
    sizes: (usize, usize, usize),
    vocab: &VocabConfig,
) -> Result<PromptBatch> {
    let (n_l, n_s, n_c) = sizes;
    if n_l == 0 || n_s == 0 || n_c == 0 {
        return Err(Error::Argument("prompt counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live = sample_without_replacement(
        &enumerate_prompts(Family::Live, vocab)?,
        n_l,
        &mut rng,
        Family::Live,
    )?;
    let spoof = sample_without_replacement(
        &enumerate_prompts(Family::Spoof, vocab)?,
        n_s,
        &mut rng,
        Family::Spoof,
    )?;
    let content = sample_without_replacement(
        &enumerate_prompts(Family::Content, vocab)?,
        n_c,
        &mut rng,
        Family::Content,
    )?;
    let mut hybrid = Vec::with_capacity(n_s);
    let mut pairing = Vec::with_capacity(n_s);
    for (j, s) in spoof.iter().enumerate() {
        let i = j % n_l;
        hybrid.push(build_hybrid(&live[i], s)?);
        pairing.push((i, j));
    }
    Ok(PromptBatch {
        live,
        spoof,
        content,
        hybrid,
        pairing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(la: &[&str], sa: &[&str], oo: &[&str], cw: &[&str], pa: &[Position]) -> VocabConfig {
        VocabConfig {
            live_adjectives: la.iter().map(|s| s.to_string()).collect(),
            spoof_adjectives: sa.iter().map(|s| s.to_string()).collect(),
            occluding_objects: oo.iter().map(|s| s.to_string()).collect(),
            content_words: cw.iter().map(|s| s.to_string()).collect(),
            positions: pa.to_vec(),
        }
    }

    #[test]
    fn live_enumeration_matches_template() {
        let v = vocab(&["live", "real"], &["spoof"], &["mask"], &["face"], &[Position::Upper]);
        let prompts = enumerate_prompts(Family::Live, &v).unwrap();
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, vec!["This is a live face.", "This is a real face."]);
    }

    #[test]
    fn content_enumeration_single_word() {
        let v = vocab(&["live"], &["spoof"], &["mask"], &["face"], &[Position::Upper]);
        let prompts = enumerate_prompts(Family::Content, &v).unwrap();
        assert_eq!(prompts.len(), 1);
        assert_eq!(prompts[0].text, "This is a face image.");
    }

    #[test]
    fn spoof_enumeration_is_cartesian() {
        let v = vocab(
            &["live"],
            &["spoof"],
            &["mask"],
            &["face"],
            &[Position::Upper, Position::Right],
        );
        let prompts = enumerate_prompts(Family::Spoof, &v).unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts.iter().any(|p| p.position == Some(Position::Upper)));
        assert!(prompts.iter().any(|p| p.position == Some(Position::Right)));
    }

    #[test]
    fn enumeration_size_is_slot_product() {
        let v = VocabConfig::default();
        let spoof = enumerate_prompts(Family::Spoof, &v).unwrap();
        assert_eq!(spoof.len(), 4 * 10 * 4);
        let hybrid = enumerate_prompts(Family::Hybrid, &v).unwrap();
        assert_eq!(hybrid.len(), 4 * 4 * 10 * 4);
        // No duplicate texts.
        let mut texts: Vec<&String> = spoof.iter().map(|p| &p.text).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), spoof.len());
    }

    #[test]
    fn empty_slot_is_config_error() {
        let v = vocab(&[], &["spoof"], &["mask"], &["face"], &[Position::Upper]);
        assert!(matches!(
            enumerate_prompts(Family::Live, &v),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hybrid_text_matches_template() {
        let l = Prompt::live("live");
        let s = Prompt::spoof("spoof", Position::Upper, "mask");
        let h = build_hybrid(&l, &s).unwrap();
        assert_eq!(
            h.text,
            "This is a spoof modified by covering the upper part of a live face with a mask."
        );
        assert_eq!(h.position, s.position);
        assert_eq!(h.spoof_adjective, s.spoof_adjective);
        assert_eq!(h.occluding_object, s.occluding_object);
        assert_eq!(h.live_adjective, l.live_adjective);
    }

    #[test]
    fn hybrid_rejects_wrong_families() {
        let l = Prompt::live("live");
        let s = Prompt::spoof("spoof", Position::Upper, "mask");
        assert!(build_hybrid(&s, &l).is_err());
        assert!(build_hybrid(&l, &l).is_err());
    }

    #[test]
    fn hybrid_round_trips_through_parse() {
        let l = Prompt::live("real");
        let s = Prompt::spoof("fake", Position::Right, "photo");
        let h = build_hybrid(&l, &s).unwrap();
        let parsed = parse_prompt(&h.text).unwrap();
        assert_eq!(parsed, h);
    }

    #[test]
    fn all_families_round_trip() {
        let v = VocabConfig::default();
        for family in [Family::Live, Family::Spoof, Family::Content, Family::Hybrid] {
            for p in enumerate_prompts(family, &v).unwrap() {
                assert_eq!(parse_prompt(&p.text).unwrap(), p, "round trip failed for {:?}", p.text);
            }
        }
    }

    #[test]
    fn sample_batch_is_deterministic() {
        let v = VocabConfig::default();
        let a = sample_batch(0, (3, 5, 2), &v).unwrap();
        let b = sample_batch(0, (3, 5, 2), &v).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(1, (3, 5, 2), &v).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimal_batch_has_one_pairing() {
        let v = VocabConfig::default();
        let b = sample_batch(7, (1, 1, 1), &v).unwrap();
        assert_eq!(b.hybrid.len(), 1);
        assert_eq!(b.pairing, vec![(0, 0)]);
    }

    #[test]
    fn oversized_request_is_argument_error() {
        let v = VocabConfig::default();
        assert!(matches!(
            sample_batch(0, (5, 1, 1), &v),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pairing_indices_consistent_with_hybrids() {
        let v = VocabConfig::default();
        let b = sample_batch(3, (2, 5, 2), &v).unwrap();
        for (k, &(i, j)) in b.pairing.iter().enumerate() {
            let rebuilt = build_hybrid(&b.live[i], &b.spoof[j]).unwrap();
            assert_eq!(b.hybrid[k], rebuilt);
        }
    }

    #[test]
    fn spoof_sampling_is_uniform_over_seeds() {
        // Monte-Carlo frequency check: inclusion probability of each spoof
        // prompt is n_s / N; empirical frequency over 1000 seeds must be
        // within 3 sigma.
        let v = vocab(
            &["live"],
            &["spoof", "fake"],
            &["mask", "photo"],
            &["face"],
            &[Position::Upper, Position::Lower],
        );
        let enumeration = enumerate_prompts(Family::Spoof, &v).unwrap();
        let n = enumeration.len(); // 8
        let n_s = 3;
        let trials = 1000;
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            let b = sample_batch(seed, (1, n_s, 1), &v).unwrap();
            for s in &b.spoof {
                let idx = enumeration.iter().position(|p| p == s).unwrap();
                counts[idx] += 1;
            }
        }
        let p = n_s as f64 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "prompt {i}: freq {freq} vs expected {p} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn dump_line_format() {
        let s = Prompt::spoof("spoof", Position::UpperLeft, "mask");
        assert_eq!(
            s.dump_line(),
            "spoof\tThis is a spoof face modified by covering the upper left part with a mask.\tsa=spoof;pa=upper left;oo=mask"
        );
    }
}
