//! The four trainable components behind backbone-agnostic interfaces: image
//! encoder, text encoder, fusion module and spoof cue map decoder, realized
//! as a tiny deterministic toy backbone.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, NodeId, Tape};
use crate::prompt::VocabConfig;
use crate::scm::SpoofCueMap;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OCFASCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Width of the trainable bottleneck head on the image encoder.
pub const EI_HEAD_RANK: usize = 8;

/// Fixed-dimension vector in the joint image/text feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// An RGB image with values in [0, 1], interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != height * width * 3 {
            return Err(Error::Argument(format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }
}

/// The four parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    Fusion,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "ei.",
            ParamGroup::TextEncoder => "et.",
            ParamGroup::Fusion => "r.",
            ParamGroup::Decoder => "d.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Toy backbone hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub scm_shape: (usize, usize, usize),
    pub image_size: usize,
    pub patch_size: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 64,
            scm_shape: (1, 16, 16),
            image_size: 64,
            patch_size: 16,
            max_tokens: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.scm_shape;
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid scm_shape {:?}", self.scm_shape)));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(
                "scm height and width must be even (the decoder upsamples 2x)".into(),
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Splits text into word and punctuation tokens.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || ch == '.' || ch == ',' {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if ch == '.' || ch == ',' {
                tokens.push(ch.to_string());
            }
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

const TEMPLATE_WORDS: [&str; 12] = [
    "This", "is", "a", "face", "image", "modified", "by", "covering", "the", "part", "with", "of",
];

/// Deterministic token vocabulary for a prompt grammar: template words, slot
/// words, and punctuation, sorted.
pub fn build_token_vocab(vocab: &VocabConfig) -> Vec<String> {
    let mut words = vocab.all_words();
    words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
    words.push(".".to_string());
    words.push(",".to_string());
    words.sort();
    words.dedup();
    words
}

/// All trainable parameters plus the fixed metadata they depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub token_vocab: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
}

/// Round every entry to its nearest f32 so checkpoint serialization (32-bit
/// floats) is lossless.
pub fn quantize_f32(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

impl ModelState {
    /// Parameter tensor names and shapes for a given config/vocab.
    fn param_specs(config: &ModelConfig, vocab_len: usize) -> Vec<(String, Vec<usize>)> {
        let d = config.d_emb;
        let (c, h, w) = config.scm_shape;
        let (h2, w2) = (h / 2, w / 2);
        vec![
            // The patch featurizer is a frozen random projection (a stand-in
            // for a pretrained backbone): it carries no parameter-group
            // prefix, so it is saved with the model but never trained. The
            // residual skip over it keeps input variation visible in the
            // embedding no matter where the trainable head moves.
            ("buf.ei.w1".into(), vec![d, config.patch_dim()]),
            ("buf.ei.b1".into(), vec![d]),
            // The trainable image head is a low-rank bottleneck adapter: it
            // can steer the embedding but cannot cancel arbitrary directions
            // of the frozen trunk, which keeps spoof-induced deviations
            // visible no matter where alignment training moves the head.
            ("ei.w2".into(), vec![EI_HEAD_RANK, d]),
            ("ei.b2".into(), vec![EI_HEAD_RANK]),
            ("ei.w3".into(), vec![d, EI_HEAD_RANK]),
            ("ei.b3".into(), vec![d]),
            ("et.tok".into(), vec![vocab_len, d]),
            ("et.w1".into(), vec![d, d]),
            ("et.b1".into(), vec![d]),
            ("et.w2".into(), vec![d, d]),
            ("et.b2".into(), vec![d]),
            ("r.w1".into(), vec![d, 2 * d]),
            ("r.b1".into(), vec![d]),
            ("r.w2".into(), vec![d, d]),
            ("r.b2".into(), vec![d]),
            ("r.w3".into(), vec![d, d]),
            ("r.b3".into(), vec![d]),
            ("d.w1".into(), vec![c * h2 * w2, d]),
            ("d.b1".into(), vec![c * h2 * w2]),
            ("d.k".into(), vec![c, c, 2, 2]),
            ("d.kb".into(), vec![c]),
        ]
    }

    /// Seeded initialization: uniform Xavier bounds for weight matrices, zero
    /// biases, small uniform token embeddings. Bit-reproducible per seed.
    pub fn init(config: ModelConfig, vocab: &VocabConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let token_vocab = build_token_vocab(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f63_6661_735f_6d64);
        let mut params = BTreeMap::new();
        for (name, shape) in Self::param_specs(&config, token_vocab.len()) {
            let mut t = Tensor::zeros(shape.clone());
            let is_bias = shape.len() == 1 && !name.ends_with("tok");
            if !is_bias {
                let (fan_out, fan_in) = if shape.len() >= 2 {
                    (shape[0], shape[1..].iter().product::<usize>())
                } else {
                    (shape[0], shape[0])
                };
                let bound = if name == "et.tok" {
                    0.1
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                };
                for v in t.data.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                quantize_f32(&mut t.data);
            }
            params.insert(name, t);
        }
        Self::ground_object_tokens(&config, vocab, &token_vocab, &mut params);
        Self::init_fusion_identity(&config, &mut params);
        Ok(ModelState { config, token_vocab, params })
    }

    /// Identity-style initialization of the fusion module: at init `R(z, s)`
    /// is approximately the coordinate-wise mean of its two inputs, so fused
    /// pseudo spoof features start adjacent to the live cluster, offset along
    /// the spoof-prompt direction — the operating point the reconstruction
    /// loss refines, rather than a random mixing matrix whose fused features
    /// would land at arbitrary points. The bias shift keeps both GELU layers
    /// in their near-linear region and is undone by the output bias.
    fn init_fusion_identity(config: &ModelConfig, params: &mut BTreeMap<String, Tensor>) {
        let d = config.d_emb;
        const SHIFT: f64 = 3.0;
        let w1 = params.get_mut("r.w1").unwrap();
        w1.data.fill(0.0);
        for k in 0..d {
            w1.data[k * 2 * d + k] = 0.5;
            w1.data[k * 2 * d + d + k] = 0.5;
        }
        params.get_mut("r.b1").unwrap().data.fill(SHIFT);
        for name in ["r.w2", "r.w3"] {
            let w = params.get_mut(name).unwrap();
            w.data.fill(0.0);
            for k in 0..d {
                w.data[k * d + k] = 1.0;
            }
        }
        params.get_mut("r.b2").unwrap().data.fill(0.0);
        params.get_mut("r.b3").unwrap().data.fill(-SHIFT);
    }

    /// Cross-modal grounding of the occluding-object token rows: each word is
    /// initialized to the frozen patch featurizer's response to its attack
    /// material's canonical high-contrast texture, minus the response to a
    /// flat mid-gray patch. This stands in for the alignment a pretrained
    /// joint vision-language space provides — without it the visually
    /// grounded words would start at arbitrary directions and prompt
    /// supervision could not transfer to images. Rows are rescaled to the
    /// norm of a typical random token row.
    fn ground_object_tokens(
        config: &ModelConfig,
        vocab: &VocabConfig,
        token_vocab: &[String],
        params: &mut BTreeMap<String, Tensor>,
    ) {
        let d = config.d_emb;
        let p = config.patch_size;
        let patch_dim = config.patch_dim();
        let w1 = params["buf.ei.w1"].data.clone();
        let b1 = params["buf.ei.b1"].data.clone();
        let respond = |pixel: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            (0..d)
                .map(|i| {
                    let mut acc = b1[i];
                    for r in 0..p {
                        for c in 0..p {
                            let v = pixel(r, c);
                            for ch in 0..3 {
                                acc += w1[i * patch_dim + (r * p + c) * 3 + ch] * v;
                            }
                        }
                    }
                    crate::graph::gelu(acc)
                })
                .collect()
        };
        let gray = respond(&|_, _| 0.5);
        let table_norm = 0.1 * (d as f64 / 3.0).sqrt();
        for (k, word) in vocab.occluding_objects.iter().enumerate() {
            let tex = respond(&|r, c| {
                if crate::synthetic::occluder_pixel(k, r, c) { 250.0 / 255.0 } else { 5.0 / 255.0 }
            });
            let diff: Vec<f64> = tex.iter().zip(&gray).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            // Match the expected norm of a uniform(-0.1, 0.1) row.
            let scale = table_norm / norm;
            if let Ok(idx) = token_vocab.binary_search(word) {
                let table = params.get_mut("et.tok").expect("token table");
                for (j, v) in diff.iter().enumerate() {
                    table.data[idx * d + j] = v * scale;
                }
            }
        }
        quantize_f32(&mut params.get_mut("et.tok").expect("token table").data);
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).expect("unknown parameter")
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn group_param_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| ParamGroup::of(n) == Some(group))
            .cloned()
            .collect()
    }

    /// Token ids for a prompt text. Unknown tokens and over-long sequences
    /// are errors.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = tokenize_text(text);
        if tokens.len() > self.config.max_tokens {
            return Err(Error::Argument(format!(
                "token sequence length {} exceeds max {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        tokens
            .iter()
            .map(|t| {
                self.token_vocab
                    .binary_search(t)
                    .map_err(|_| Error::Argument(format!("unknown token {t:?}")))
            })
            .collect()
    }

    /// Writes the versioned checkpoint container. `extras` lets the trainer
    /// persist optimizer tensors alongside the model parameters.
    pub fn save_checkpoint(&self, path: &Path, extras: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut buf, CHECKPOINT_VERSION);
        write_u32(&mut buf, self.config.d_emb as u32);
        write_u32(&mut buf, self.config.scm_shape.0 as u32);
        write_u32(&mut buf, self.config.scm_shape.1 as u32);
        write_u32(&mut buf, self.config.scm_shape.2 as u32);
        write_u32(&mut buf, self.config.image_size as u32);
        write_u32(&mut buf, self.config.patch_size as u32);
        write_u32(&mut buf, self.config.max_tokens as u32);
        write_u32(&mut buf, self.token_vocab.len() as u32);
        for token in &self.token_vocab {
            write_str(&mut buf, token);
        }
        write_u32(&mut buf, (self.params.len() + extras.len()) as u32);
        for (name, tensor) in self.params.iter().chain(extras.iter()) {
            write_str(&mut buf, name);
            write_u32(&mut buf, tensor.shape.len() as u32);
            for &d in &tensor.shape {
                write_u32(&mut buf, d as u32);
            }
            for &v in &tensor.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Loads a checkpoint. Returns the model state and any extra tensors
    /// (optimizer state) stored alongside it.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelState, BTreeMap<String, Tensor>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Config(format!("{}: not a checkpoint file", path.display())));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let config = ModelConfig {
            d_emb: cur.u32()? as usize,
            scm_shape: (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize),
            image_size: cur.u32()? as usize,
            patch_size: cur.u32()? as usize,
            max_tokens: cur.u32()? as usize,
        };
        config.validate()?;
        let n_tokens = cur.u32()? as usize;
        let mut token_vocab = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            token_vocab.push(cur.string()?);
        }
        let n_tensors = cur.u32()? as usize;
        let expected = Self::param_specs(&config, token_vocab.len());
        let expected_names: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        let mut params = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = cur.take(4)?;
                data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64);
            }
            let tensor = Tensor { shape, data };
            if expected_names.contains(name.as_str()) {
                params.insert(name, tensor);
            } else {
                extras.insert(name, tensor);
            }
        }
        // Validate the parameter inventory against the declared config.
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "{}: checkpoint holds {} model tensors, expected {}",
                path.display(),
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if &t.shape == shape => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "{}: tensor {name} has shape {:?}, expected {shape:?}",
                        path.display(),
                        t.shape
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "{}: checkpoint is missing tensor {name}",
                        path.display()
                    )))
                }
            }
        }
        Ok((ModelState { config, token_vocab, params }, extras))
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Config(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Config(format!("{}: invalid utf-8 in checkpoint", self.path.display())))
    }
}

/// Builds forward passes on a tape. Parameters of groups not listed in
/// `trainable` are registered as constants, so gradients never reach them.
pub struct Forward<'a> {
    pub tape: Tape,
    state: &'a ModelState,
    trainable: Vec<ParamGroup>,
    param_nodes: HashMap<String, NodeId>,
}

impl<'a> Forward<'a> {
    pub fn new(state: &'a ModelState, trainable: &[ParamGroup]) -> Forward<'a> {
        Forward {
            tape: Tape::new(),
            state,
            trainable: trainable.to_vec(),
            param_nodes: HashMap::new(),
        }
    }

    fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let requires_grad = ParamGroup::of(name)
            .is_some_and(|group| self.trainable.contains(&group));
        let id = self
            .tape
            .input(self.state.param(name).data.clone(), requires_grad);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    /// `E_I`: patch-flatten, frozen random affine+GELU per patch, mean pool,
    /// then the mean of the pooled features and a trainable low-rank
    /// bottleneck head with a bounded (tanh) output — a residual adapter that
    /// can shift but never swamp the frozen backbone features.
    pub fn encode_image(&mut self, image: &Image) -> Result<NodeId> {
        let size = self.state.config.image_size;
        if image.height != size || image.width != size {
            return Err(Error::Argument(format!(
                "image is {}x{}, the encoder expects {size}x{size}",
                image.height, image.width
            )));
        }
        if image.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Argument("image values must lie in [0, 1]".into()));
        }
        let p = self.state.config.patch_size;
        let grid = size / p;
        let w1 = self.param("buf.ei.w1");
        let b1 = self.param("buf.ei.b1");
        let mut patch_feats = Vec::with_capacity(grid * grid);
        for pr in 0..grid {
            for pc in 0..grid {
                let mut patch = Vec::with_capacity(p * p * 3);
                for r in 0..p {
                    for c in 0..p {
                        let base = ((pr * p + r) * size + pc * p + c) * 3;
                        patch.extend_from_slice(&image.data[base..base + 3]);
                    }
                }
                let x = self.tape.constant(patch);
                let y = self.tape.affine(w1, b1, x);
                patch_feats.push(self.tape.gelu(y));
            }
        }
        let pooled = self.tape.mean_list(patch_feats);
        let w2 = self.param("ei.w2");
        let b2 = self.param("ei.b2");
        let y = self.tape.affine(w2, b2, pooled);
        let h = self.tape.gelu(y);
        let w3 = self.param("ei.w3");
        let b3 = self.param("ei.b3");
        let y = self.tape.affine(w3, b3, h);
        let head = self.tape.tanh(y);
        Ok(self.tape.mean_list(vec![pooled, head]))
    }

    /// `E_T`: token embedding lookup, mean pool, then the mean of the pooled
    /// embedding and a two-layer affine head with a bounded (tanh) output — a
    /// residual head mirroring the image side, so grounded token directions
    /// survive the random-init head and the adapter can shift but never swamp
    /// the pooled embedding.
    pub fn encode_text(&mut self, text: &str) -> Result<NodeId> {
        let indices = self.state.tokenize(text)?;
        let table = self.param("et.tok");
        let pooled = self
            .tape
            .mean_lookup(table, self.state.config.d_emb, indices);
        let w1 = self.param("et.w1");
        let b1 = self.param("et.b1");
        let y = self.tape.affine(w1, b1, pooled);
        let h1 = self.tape.gelu(y);
        let w2 = self.param("et.w2");
        let b2 = self.param("et.b2");
        let y = self.tape.affine(w2, b2, h1);
        let head = self.tape.tanh(y);
        Ok(self.tape.mean_list(vec![pooled, head]))
    }

    /// `R`: three 1x1 convolution layers over the concatenated pair.
    pub fn fuse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.state.config.d_emb;
        if self.tape.value(a).len() != d || self.tape.value(b).len() != d {
            return Err(Error::Argument(format!(
                "fuse expects two {d}-dimensional embeddings"
            )));
        }
        let cat = self.tape.concat(a, b);
        let w1 = self.param("r.w1");
        let b1 = self.param("r.b1");
        let y = self.tape.affine(w1, b1, cat);
        let h1 = self.tape.gelu(y);
        let w2 = self.param("r.w2");
        let b2 = self.param("r.b2");
        let y = self.tape.affine(w2, b2, h1);
        let h2 = self.tape.gelu(y);
        let w3 = self.param("r.w3");
        let b3 = self.param("r.b3");
        Ok(self.tape.affine(w3, b3, h2))
    }

    /// `D`: affine to a half-resolution grid, GELU, transposed-conv 2x upsample.
    pub fn decode_scm(&mut self, e: NodeId) -> Result<NodeId> {
        let d = self.state.config.d_emb;
        if self.tape.value(e).len() != d {
            return Err(Error::Argument(format!(
                "decode_scm expects a {d}-dimensional embedding, got {}",
                self.tape.value(e).len()
            )));
        }
        let (c, h, w) = self.state.config.scm_shape;
        let w1 = self.param("d.w1");
        let b1 = self.param("d.b1");
        let y = self.tape.affine(w1, b1, e);
        let h1 = self.tape.gelu(y);
        let k = self.param("d.k");
        let kb = self.param("d.kb");
        Ok(self.tape.conv_t_2x2(k, kb, h1, c, c, h / 2, w / 2))
    }

    pub fn embedding(&self, id: NodeId) -> Embedding {
        Embedding { values: self.tape.value(id).to_vec() }
    }

    pub fn map(&self, id: NodeId) -> SpoofCueMap {
        SpoofCueMap {
            shape: self.state.config.scm_shape,
            data: self.tape.value(id).to_vec(),
        }
    }

    /// Gradient of a backward pass w.r.t. a named parameter (zeros when the
    /// parameter's group is frozen or the parameter was never used).
    pub fn grad_of(&self, grads: &Gradients, name: &str) -> Vec<f64> {
        match self.param_nodes.get(name) {
            Some(&id) => grads.of(id).to_vec(),
            None => vec![0.0; self.state.param(name).data.len()],
        }
    }
}

/// Forward-only image embedding.
pub fn encode_image(state: &ModelState, image: &Image) -> Result<Embedding> {
    let mut fwd = Forward::new(state, &[]);
    let id = fwd.encode_image(image)?;
    Ok(fwd.embedding(id))
}

/// Forward-only text embedding.
pub fn encode_text(state: &ModelState, text: &str) -> Result<Embedding> {
    let mut fwd = Forward::new(state, &[]);
    let id = fwd.encode_text(text)?;
    Ok(fwd.embedding(id))
}

/// Forward-only fusion of two embeddings.
pub fn fuse(state: &ModelState, a: &Embedding, b: &Embedding) -> Result<Embedding> {
    let mut fwd = Forward::new(state, &[]);
    let an = fwd.tape.constant(a.values.clone());
    let bn = fwd.tape.constant(b.values.clone());
    let id = fwd.fuse(an, bn)?;
    Ok(fwd.embedding(id))
}

/// Forward-only spoof cue map decoding.
pub fn decode_scm(state: &ModelState, e: &Embedding) -> Result<SpoofCueMap> {
    let mut fwd = Forward::new(state, &[]);
    let en = fwd.tape.constant(e.values.clone());
    let id = fwd.decode_scm(en)?;
    Ok(fwd.map(id))
}
