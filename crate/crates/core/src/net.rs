//! Tiny encoder/decoder segmentation network with an explicit split between
//! the feature extractor `f` and the mask predictor `g`.
//!
//! The split is declared by the architecture, not inferred: the selective
//! moving-average rules in the training loops act on the two partitions
//! separately, so the boundary has to be a first-class property.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng;
use crate::tensor::{Graph, NodeId, Padding, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("batch has shape {got:?}, expected [N,{expect_c},H,W]")]
    BatchShape { got: Vec<usize>, expect_c: usize },
    #[error("parameter sets are not structurally identical: {0}")]
    StructureMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Layer plan: `feature_channels` are the conv+relu widths of the feature
/// extractor; `predictor_channels` are conv+relu widths of the predictor,
/// which always ends in a 1-channel conv + sigmoid head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    pub input_channels: usize,
    pub feature_channels: Vec<usize>,
    pub predictor_channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for NetworkArchitecture {
    fn default() -> Self {
        Self {
            input_channels: 1,
            feature_channels: vec![8, 16],
            predictor_channels: vec![8],
            kernel_size: 3,
        }
    }
}

impl NetworkArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(NetError::InvalidArchitecture(
                "input_channels must be positive".into(),
            ));
        }
        if self.feature_channels.is_empty() {
            return Err(NetError::InvalidArchitecture(
                "feature extractor needs at least one layer".into(),
            ));
        }
        if self.feature_channels.iter().any(|c| *c == 0)
            || self.predictor_channels.iter().any(|c| *c == 0)
        {
            return Err(NetError::InvalidArchitecture(
                "zero-width layer".into(),
            ));
        }
        if self.kernel_size == 0 {
            return Err(NetError::InvalidArchitecture("kernel_size must be positive".into()));
        }
        Ok(())
    }

    /// Conv layer shapes of the `f` partition: (name, in_ch, out_ch).
    fn f_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        let mut c_in = self.input_channels;
        for (i, c_out) in self.feature_channels.iter().enumerate() {
            layers.push((format!("f{i}"), c_in, *c_out));
            c_in = *c_out;
        }
        layers
    }

    /// Conv layer shapes of the `g` partition, head included.
    fn g_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        let mut c_in = *self.feature_channels.last().expect("validated");
        for (i, c_out) in self.predictor_channels.iter().enumerate() {
            layers.push((format!("g{i}"), c_in, *c_out));
            c_in = *c_out;
        }
        layers.push(("head".into(), c_in, 1));
        layers
    }
}

/// A model's weights, partitioned into the `f` and `g` namespaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    f: BTreeMap<String, Tensor>,
    g: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn f_params(&self) -> &BTreeMap<String, Tensor> {
        &self.f
    }

    pub fn g_params(&self) -> &BTreeMap<String, Tensor> {
        &self.g
    }

    pub fn f_params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.f
    }

    pub fn g_params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.g
    }

    /// All parameters in canonical order: the `f` map, then the `g` map.
    pub fn iter_all(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.f.iter().chain(self.g.iter())
    }

    pub fn iter_all_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.f.iter_mut().chain(self.g.iter_mut())
    }

    pub fn tensor_count(&self) -> usize {
        self.f.len() + self.g.len()
    }

    pub fn element_count(&self) -> usize {
        self.iter_all().map(|(_, t)| t.len()).sum()
    }

    /// Flatten to owned `(name, tensor)` pairs in canonical order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.iter_all()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn same_structure(&self, other: &Self) -> Result<()> {
        for (mine, theirs, part) in [(&self.f, &other.f, "f"), (&self.g, &other.g, "g")] {
            if mine.len() != theirs.len() {
                return Err(NetError::StructureMismatch(format!(
                    "{part}: {} vs {} tensors",
                    mine.len(),
                    theirs.len()
                )));
            }
            for ((na, ta), (nb, tb)) in mine.iter().zip(theirs) {
                if na != nb {
                    return Err(NetError::StructureMismatch(format!(
                        "{part}: name {na} vs {nb}"
                    )));
                }
                if ta.shape() != tb.shape() {
                    return Err(NetError::StructureMismatch(format!(
                        "{part}.{na}: shape {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.iter_all_mut() {
            t.clear_grad();
        }
    }
}

/// Graph-side handles of one forward pass: the output probabilities plus the
/// parameter leaves, so callers can pull gradients back after `backward`.
pub struct ForwardPass {
    pub probs: NodeId,
    bound: Vec<(String, NodeId)>,
}

impl ForwardPass {
    /// Copy gradients from the graph into the parameter set's grad slots.
    pub fn pull_grads(&self, graph: &Graph, params: &mut ParameterSet) {
        let mut by_name: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (name, id) in &self.bound {
            by_name.insert(name, *id);
        }
        for (name, tensor) in params.iter_all_mut() {
            if let Some(id) = by_name.get(name.as_str()) {
                if let Some(g) = graph.grad(*id) {
                    tensor.accumulate_grad(g);
                }
            }
        }
    }
}

/// The network itself: a stateless plan that turns a `ParameterSet` plus a
/// batch into probabilities.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub arch: NetworkArchitecture,
}

impl SegNet {
    pub fn new(arch: NetworkArchitecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    /// He-style fan-in scaled uniform initialization, deterministic per seed.
    /// Biases start at zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = rng::stream(rng::derive_seed(seed, "init"), 0);
        let mut f = BTreeMap::new();
        let mut g = BTreeMap::new();
        let k = self.arch.kernel_size;
        for (target, layers) in [
            (&mut f, self.arch.f_layers()),
            (&mut g, self.arch.g_layers()),
        ] {
            for (name, c_in, c_out) in layers {
                let fan_in = (c_in * k * k) as f64;
                let limit = (6.0 / fan_in).sqrt();
                let n = c_out * c_in * k * k;
                let weights: Vec<f64> = (0..n)
                    .map(|_| rng::uniform_in(&mut rng, -limit, limit))
                    .collect();
                target.insert(
                    format!("{name}.weight"),
                    Tensor::new(vec![c_out, c_in, k, k], weights).expect("shape consistent"),
                );
                target.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
            }
        }
        ParameterSet { f, g }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.arch.input_channels {
            return Err(NetError::BatchShape {
                got: shape.to_vec(),
                expect_c: self.arch.input_channels,
            });
        }
        Ok(())
    }

    /// Record a forward pass on `graph`. Parameters become trainable leaves;
    /// the batch is a constant.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &ParameterSet,
        batch: &Tensor,
    ) -> Result<ForwardPass> {
        self.check_batch(batch.shape())?;
        let mut bound = Vec::with_capacity(params.tensor_count());
        let mut bind = |graph: &mut Graph, map: &BTreeMap<String, Tensor>| {
            let mut ids = BTreeMap::new();
            for (name, tensor) in map {
                let id = graph.param(tensor);
                bound.push((name.clone(), id));
                ids.insert(name.clone(), id);
            }
            ids
        };
        let f_ids = bind(graph, &params.f);
        let g_ids = bind(graph, &params.g);

        let mut x = graph.leaf(batch);
        for (name, _, _) in self.arch.f_layers() {
            let w = f_ids[&format!("{name}.weight")];
            let b = f_ids[&format!("{name}.bias")];
            x = graph.conv2d(x, w, b, Padding::Same)?;
            x = graph.relu(x);
        }
        for (name, _, _) in self.arch.g_layers() {
            let w = g_ids[&format!("{name}.weight")];
            let b = g_ids[&format!("{name}.bias")];
            x = graph.conv2d(x, w, b, Padding::Same)?;
            if name == "head" {
                x = graph.sigmoid(x);
            } else {
                x = graph.relu(x);
            }
        }
        Ok(ForwardPass { probs: x, bound })
    }

    /// Inference-only forward: returns the probability tensor `[N,1,H,W]`.
    pub fn forward(&self, params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let pass = self.forward_graph(&mut graph, params, batch)?;
        Ok(graph.tensor(pass.probs))
    }
}

/// Teacher, teaching assistant and student with their shared architecture.
#[derive(Debug, Clone)]
pub struct ModelTriplet {
    pub teacher: ParameterSet,
    pub assistant: ParameterSet,
    pub student: ParameterSet,
    pub arch: NetworkArchitecture,
}

impl ModelTriplet {
    /// All three models start as clones of one seeded initialization.
    pub fn init(arch: NetworkArchitecture, seed: u64) -> Result<Self> {
        let net = SegNet::new(arch.clone())?;
        let params = net.init_params(seed);
        Ok(Self {
            teacher: params.clone(),
            assistant: params.clone(),
            student: params,
            arch,
        })
    }

    pub fn check_consistent(&self) -> Result<()> {
        self.teacher.same_structure(&self.assistant)?;
        self.teacher.same_structure(&self.student)
    }
}

// ---- checkpoint container ----
//
// Flat binary layout, all integers and floats little-endian:
//   magic "TTASCKPT" | u32 version=1
//   u32 input_channels | u32 n_f | n_f x u32 | u32 n_g | n_g x u32 | u32 kernel_size
//   u32 tensor_count
//   per tensor: u32 name_len | name bytes | u32 rank | rank x u32 dims | f64 x prod(dims)

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTASCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name}: dims {dims:?} disagree with payload")]
    DimMismatch { name: String, dims: Vec<usize> },
    #[error("non-finite value in tensor {0}; refusing to write")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct CheckpointWriter<W: Write> {
    out: W,
}

impl<W: Write> CheckpointWriter<W> {
    pub fn new(mut out: W, arch: &NetworkArchitecture, tensor_count: usize) -> std::result::Result<Self, CheckpointError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(arch.input_channels as u32).to_le_bytes())?;
        out.write_all(&(arch.feature_channels.len() as u32).to_le_bytes())?;
        for c in &arch.feature_channels {
            out.write_all(&(*c as u32).to_le_bytes())?;
        }
        out.write_all(&(arch.predictor_channels.len() as u32).to_le_bytes())?;
        for c in &arch.predictor_channels {
            out.write_all(&(*c as u32).to_le_bytes())?;
        }
        out.write_all(&(arch.kernel_size as u32).to_le_bytes())?;
        out.write_all(&(tensor_count as u32).to_le_bytes())?;
        Ok(Self { out })
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> std::result::Result<(), CheckpointError> {
        if !t.values().iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(name.to_string()));
        }
        self.out.write_all(&(name.len() as u32).to_le_bytes())?;
        self.out.write_all(name.as_bytes())?;
        self.out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            self.out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.values() {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Hand back the writer for trailing metadata blocks.
    pub fn into_inner(self) -> W {
        self.out
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> std::result::Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated(what))
}

fn read_u32(r: &mut impl Read, what: &'static str) -> std::result::Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub struct CheckpointReader<R: Read> {
    inner: R,
    pub arch: NetworkArchitecture,
    remaining: u32,
}

impl<R: Read> CheckpointReader<R> {
    pub fn new(mut inner: R) -> std::result::Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut inner, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut inner, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let input_channels = read_u32(&mut inner, "arch")? as usize;
        let n_f = read_u32(&mut inner, "arch")? as usize;
        let mut feature_channels = Vec::with_capacity(n_f);
        for _ in 0..n_f {
            feature_channels.push(read_u32(&mut inner, "arch")? as usize);
        }
        let n_g = read_u32(&mut inner, "arch")? as usize;
        let mut predictor_channels = Vec::with_capacity(n_g);
        for _ in 0..n_g {
            predictor_channels.push(read_u32(&mut inner, "arch")? as usize);
        }
        let kernel_size = read_u32(&mut inner, "arch")? as usize;
        let remaining = read_u32(&mut inner, "tensor count")?;
        Ok(Self {
            inner,
            arch: NetworkArchitecture {
                input_channels,
                feature_channels,
                predictor_channels,
                kernel_size,
            },
            remaining,
        })
    }

    pub fn next_tensor(&mut self) -> std::result::Result<Option<(String, Tensor)>, CheckpointError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        self.remaining -= 1;
        let name_len = read_u32(&mut self.inner, "tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or(&mut self.inner, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Truncated("tensor name utf-8"))?;
        let rank = read_u32(&mut self.inner, "tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut self.inner, "tensor dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            read_exact_or(&mut self.inner, &mut b, "tensor values")?;
            values.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(dims.clone(), values)
            .map_err(|_| CheckpointError::DimMismatch { name: name.clone(), dims })?;
        Ok(Some((name, tensor)))
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

/// Write a parameter set as a standalone checkpoint file. Partition
/// membership is encoded in the names (`f.` / `g.` prefixes).
pub fn write_params_checkpoint(
    path: &Path,
    arch: &NetworkArchitecture,
    params: &ParameterSet,
) -> std::result::Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = CheckpointWriter::new(std::io::BufWriter::new(file), arch, params.tensor_count())?;
    for (name, t) in params.f_params() {
        w.tensor(&format!("f.{name}"), t)?;
    }
    for (name, t) in params.g_params() {
        w.tensor(&format!("g.{name}"), t)?;
    }
    use std::io::Write as _;
    w.into_inner().flush()?;
    Ok(())
}

/// Read back a parameter-set checkpoint written by `write_params_checkpoint`.
pub fn read_params_checkpoint(
    path: &Path,
) -> std::result::Result<(NetworkArchitecture, ParameterSet), CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = CheckpointReader::new(std::io::BufReader::new(file))?;
    let mut f = BTreeMap::new();
    let mut g = BTreeMap::new();
    while let Some((name, tensor)) = r.next_tensor()? {
        if let Some(rest) = name.strip_prefix("f.") {
            f.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("g.") {
            g.insert(rest.to_string(), tensor);
        } else {
            return Err(CheckpointError::DimMismatch {
                name,
                dims: vec![],
            });
        }
    }
    Ok((r.arch, ParameterSet { f, g }))
}
