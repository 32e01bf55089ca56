use std::collections::{BTreeMap, BTreeSet};

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::tape::{Arr, NodeId, Tape};
use crate::{Error, Result};

/// Named parameter storage. BTreeMap keeps iteration (and therefore hashing,
/// serialization, and optimizer order) deterministic.
#[derive(Default, Clone)]
pub struct VarStore {
    vars: BTreeMap<String, Arr>,
    trainable: BTreeSet<String>,
}

impl VarStore {
    pub fn new() -> Self {
        VarStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr, trainable: bool) {
        self.vars.insert(name.to_string(), value);
        if trainable {
            self.trainable.insert(name.to_string());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.vars.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Arr> {
        self.vars.get_mut(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if trainable {
            self.trainable.insert(name.to_string());
        } else {
            self.trainable.remove(name);
        }
    }

    /// Freeze every parameter (gradients stop flowing into them).
    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian f64 bytes in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.vars {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Replace all values from another store; shapes must agree name-for-name.
    pub fn load_from(&mut self, other: &VarStore) -> Result<()> {
        let mine: Vec<&str> = self.names().collect();
        let theirs: Vec<&str> = other.names().collect();
        if mine != theirs {
            return Err(Error::validation(format!(
                "parameter name mismatch: expected {} names, got {}",
                mine.len(),
                theirs.len()
            )));
        }
        for (name, value) in other.iter() {
            let slot = self.vars.get_mut(name).unwrap();
            if slot.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "parameter `{name}` shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    let bytes = h.finalize();
    let mut s = String::with_capacity(64);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// One training step's binding of every store variable onto a fresh tape.
/// Gradients are read back per name after `backward`.
pub struct TapeVars {
    ids: BTreeMap<String, NodeId>,
}

impl TapeVars {
    pub fn bind(tape: &mut Tape, store: &VarStore) -> Self {
        let mut ids = BTreeMap::new();
        for (name, value) in store.iter() {
            let id = tape.leaf(value.clone(), store.is_trainable(name));
            ids.insert(name.to_string(), id);
        }
        TapeVars { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn grads(&self, tape: &Tape, store: &VarStore) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            if store.is_trainable(name) {
                out.insert(name.clone(), tape.grad(*id));
            }
        }
        out
    }
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)), suited to ReLU stacks.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(gaussian(rng) * std);
    }
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Box-Muller transform over the rng's unit doubles.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// 2-D convolution layer with bias. Parameters live in the store under
/// `{prefix}.weight` / `{prefix}.bias`.
#[derive(Clone)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut VarStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        store.insert(
            &format!("{prefix}.weight"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            true,
        );
        store.insert(
            &format!("{prefix}.bias"),
            Arr::zeros(IxDyn(&[out_ch])),
            true,
        );
        Conv2dLayer {
            prefix: prefix.to_string(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &TapeVars, x: NodeId) -> NodeId {
        let w = vars.id(&format!("{}.weight", self.prefix));
        let b = vars.id(&format!("{}.bias", self.prefix));
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.add_bias_chan(y, b)
    }
}

/// Fully connected layer; `{prefix}.weight` is (in, out).
#[derive(Clone)]
pub struct LinearLayer {
    pub prefix: String,
}

impl LinearLayer {
    pub fn init(
        store: &mut VarStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        store.insert(
            &format!("{prefix}.weight"),
            he_normal(rng, &[in_dim, out_dim], in_dim),
            true,
        );
        store.insert(
            &format!("{prefix}.bias"),
            Arr::zeros(IxDyn(&[out_dim])),
            true,
        );
        LinearLayer {
            prefix: prefix.to_string(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &TapeVars, x: NodeId) -> NodeId {
        let w = vars.id(&format!("{}.weight", self.prefix));
        let b = vars.id(&format!("{}.bias", self.prefix));
        let y = tape.matmul(x, w);
        tape.add_bias_row(y, b)
    }
}

/// Two 3x3 convs with an identity skip; ReLU between and after the add.
/// Channel count is preserved.
#[derive(Clone)]
pub struct ResBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl ResBlock {
    pub fn init(store: &mut VarStore, rng: &mut ChaCha8Rng, prefix: &str, ch: usize) -> Self {
        ResBlock {
            conv1: Conv2dLayer::init(store, rng, &format!("{prefix}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2dLayer::init(store, rng, &format!("{prefix}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &TapeVars, x: NodeId) -> NodeId {
        let y = self.conv1.forward(tape, vars, x);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, vars, y);
        let y = tape.add(x, y);
        tape.relu(y)
    }
}

/// Densely connected block: each 3x3 conv sees the concatenation of the block
/// input and all previous layer outputs, then a 1x1 transition maps back to
/// `out_ch`.
#[derive(Clone)]
pub struct DenseBlock {
    convs: Vec<Conv2dLayer>,
    transition: Conv2dLayer,
}

impl DenseBlock {
    pub fn init(
        store: &mut VarStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        growth: usize,
        layers: usize,
        out_ch: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut ch = in_ch;
        for i in 0..layers {
            convs.push(Conv2dLayer::init(
                store,
                rng,
                &format!("{prefix}.layer{i}"),
                ch,
                growth,
                3,
                1,
                1,
            ));
            ch += growth;
        }
        let transition = Conv2dLayer::init(store, rng, &format!("{prefix}.transition"), ch, out_ch, 1, 1, 0);
        DenseBlock { convs, transition }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &TapeVars, x: NodeId) -> NodeId {
        let mut feats = vec![x];
        for conv in &self.convs {
            let cat = if feats.len() == 1 {
                feats[0]
            } else {
                tape.concat(1, &feats)
            };
            let y = conv.forward(tape, vars, cat);
            let y = tape.relu(y);
            feats.push(y);
        }
        let cat = tape.concat(1, &feats);
        self.transition.forward(tape, vars, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn var_store_hash_is_order_independent_of_insertion() {
        let make = |flip: bool| {
            let mut vs = VarStore::new();
            let a = Arr::from_elem(IxDyn(&[2, 2]), 1.5);
            let b = Arr::from_elem(IxDyn(&[3]), -0.25);
            if flip {
                vs.insert("beta", b.clone(), true);
                vs.insert("alpha", a.clone(), true);
            } else {
                vs.insert("alpha", a, true);
                vs.insert("beta", b, true);
            }
            vs.content_hash()
        };
        assert_eq!(make(false), make(true));
    }

    #[test]
    fn var_store_hash_changes_with_values() {
        let mut vs = VarStore::new();
        vs.insert("w", Arr::from_elem(IxDyn(&[2]), 1.0), true);
        let h1 = vs.content_hash();
        vs.get_mut("w").unwrap()[[0]] = 1.0 + 1e-15;
        assert_ne!(h1, vs.content_hash());
    }

    #[test]
    fn he_normal_is_seed_deterministic_with_sane_spread() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = he_normal(&mut r1, &[64, 32], 32);
        let b = he_normal(&mut r2, &[64, 32], 32);
        assert_eq!(a, b);
        let std_target = (2.0 / 32.0_f64).sqrt();
        let sample_std = (a.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!((sample_std - std_target).abs() / std_target < 0.15);
    }

    #[test]
    fn res_block_preserves_shape_and_trains() {
        let mut store = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ResBlock::init(&mut store, &mut rng, "rb", 4);
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &store);
        let x = tape.leaf(Arr::from_elem(IxDyn(&[1, 4, 6, 6]), 0.3), false);
        let y = block.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y).shape(), &[1, 4, 6, 6]);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let grads = vars.grads(&tape, &store);
        assert!(grads.contains_key("rb.conv1.weight"));
        assert!(grads.values().any(|g| g.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn dense_block_maps_channels() {
        let mut store = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = DenseBlock::init(&mut store, &mut rng, "db", 3, 4, 3, 8);
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &store);
        let x = tape.leaf(Arr::from_elem(IxDyn(&[2, 3, 8, 8]), 0.1), false);
        let y = block.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y).shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn frozen_vars_receive_no_grad() {
        let mut store = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = LinearLayer::init(&mut store, &mut rng, "fc", 4, 2);
        store.set_trainable("fc.weight", false);
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &store);
        let x = tape.leaf(Arr::from_elem(IxDyn(&[3, 4]), 0.5), false);
        let y = lin.forward(&mut tape, &vars, x);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let grads = vars.grads(&tape, &store);
        assert!(!grads.contains_key("fc.weight"));
        assert!(grads.contains_key("fc.bias"));
    }
}
