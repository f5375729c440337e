//! Patch embeddings: shared linear, patch-specific linear and bilinear.
//!
//! All three map a block `x` of shape `|N_l| x |N_m|` to a `d`-vector with no
//! bias. The bilinear variant gives every network `l` a factor `U_l` of shape
//! `|N_l| x d` and computes
//!
//! ```text
//! t_k = sum_{i,j} U_l[i,k] x[i,j] U_m[j,k]
//! ```
//!
//! which equals projecting `vec(x)` onto the Khatri–Rao product of `U_l` and
//! `U_m` without materializing it. The matching detokenizers map a decoder
//! token back to block space with their own parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fc::{Patch, PatchLayout};
use crate::nn::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::rng::{self, Rng};

/// Standard deviation of linear projection entries at initialization.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// Per-factor standard deviation for bilinear maps: the product of two
/// factors then has the same scale as one linear entry.
pub fn bilinear_init_std() -> f64 {
    LINEAR_INIT_STD.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Shared,
    Specific,
    Bilinear,
}

impl TokenizerKind {
    pub const ALL: [TokenizerKind; 3] = [TokenizerKind::Shared, TokenizerKind::Specific, TokenizerKind::Bilinear];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Shared => "shared",
            TokenizerKind::Specific => "specific",
            TokenizerKind::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" => Ok(TokenizerKind::Shared),
            "specific" => Ok(TokenizerKind::Specific),
            "bilinear" => Ok(TokenizerKind::Bilinear),
            other => Err(Error::Config(format!(
                "unknown tokenizer '{other}' (expected shared, specific or bilinear)"
            ))),
        }
    }
}

/// Column-wise Kronecker product: row `i * b.rows() + j`, column `k` holds
/// `a[i,k] * b[j,k]`, the same `(i, j)` order as [`Patch::vec`].
pub fn khatri_rao(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(shape_err!("khatri_rao: {} vs {} columns", a.cols(), b.cols()));
    }
    let (ra, rb, d) = (a.rows(), b.rows(), a.cols());
    let mut out = vec![0.0; ra * rb * d];
    for i in 0..ra {
        let ai = a.row(i);
        for j in 0..rb {
            let bj = b.row(j);
            let row = &mut out[(i * rb + j) * d..(i * rb + j + 1) * d];
            for k in 0..d {
                row[k] = ai[k] * bj[k];
            }
        }
    }
    Tensor::matrix(ra * rb, d, out)
}

/// Token matrix `n_patch x d`, row `p` belonging to layout pair `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, layout: &PatchLayout) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != layout.n_patch() {
            return Err(shape_err!(
                "token matrix {:?} does not have {} rows",
                tokens.shape(),
                layout.n_patch()
            ));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, p: usize) -> &[f64] {
        self.tokens.row(p)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }
}

/// Checks that `patches` are exactly the layout's blocks, in layout order.
pub fn check_patches(layout: &PatchLayout, patches: &[Patch]) -> Result<()> {
    if patches.len() != layout.n_patch() {
        return Err(shape_err!(
            "expected {} patches, got {}",
            layout.n_patch(),
            patches.len()
        ));
    }
    for (p, patch) in patches.iter().enumerate() {
        if patch.pair() != layout.pairs()[p] || patch.shape() != layout.shapes()[p] {
            return Err(shape_err!(
                "patch {p} is {:?} {:?}, layout expects {:?} {:?}",
                patch.pair(),
                patch.shape(),
                layout.pairs()[p],
                layout.shapes()[p]
            ));
        }
    }
    Ok(())
}

/// Exact learnable-scalar count of a tokenizer (or detokenizer) of width `d`.
pub fn param_count_for(kind: TokenizerKind, layout: &PatchLayout, d: usize) -> usize {
    match kind {
        TokenizerKind::Shared => layout.s_max() * d,
        TokenizerKind::Specific => layout.total_patch_len() * d,
        TokenizerKind::Bilinear => layout.region_count() * d,
    }
}

/// The parameter layout shared by a tokenizer and its detokenizer.
#[derive(Debug, Clone)]
enum Weights {
    /// One `s_max x d` (tokenizer) or `d x s_max` (detokenizer) matrix.
    Shared(ParamId),
    /// One matrix per layout pair.
    Specific(Vec<ParamId>),
    /// One `|N_l| x d` factor per network.
    Bilinear(Vec<ParamId>),
}

impl Weights {
    fn ids(&self) -> Vec<ParamId> {
        match self {
            Weights::Shared(id) => vec![*id],
            Weights::Specific(ids) | Weights::Bilinear(ids) => ids.clone(),
        }
    }

    fn kind(&self) -> TokenizerKind {
        match self {
            Weights::Shared(_) => TokenizerKind::Shared,
            Weights::Specific(_) => TokenizerKind::Specific,
            Weights::Bilinear(_) => TokenizerKind::Bilinear,
        }
    }
}

fn check_width(d: usize) -> Result<()> {
    if d < 1 {
        return Err(Error::InvalidArgument("token width must be at least 1".into()));
    }
    Ok(())
}

/// Maps patches to tokens.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    layout: PatchLayout,
    width: usize,
    weights: Weights,
}

impl Tokenizer {
    /// Registers the tokenizer's parameters in `store` under `prefix`.
    pub fn new(
        kind: TokenizerKind,
        layout: &PatchLayout,
        d: usize,
        store: &mut ParameterStore,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        check_width(d)?;
        let weights = match kind {
            TokenizerKind::Shared => Weights::Shared(store.add(
                format!("{prefix}.shared.weight"),
                Tensor::randn(&[layout.s_max(), d], LINEAR_INIT_STD, rng),
            )),
            TokenizerKind::Specific => Weights::Specific(
                layout
                    .pairs()
                    .iter()
                    .zip(layout.shapes())
                    .map(|(&(l, m), &(a, b))| {
                        store.add(
                            format!("{prefix}.specific.{l}_{m}"),
                            Tensor::randn(&[a * b, d], LINEAR_INIT_STD, rng),
                        )
                    })
                    .collect(),
            ),
            TokenizerKind::Bilinear => Weights::Bilinear(
                layout
                    .network_sizes()
                    .iter()
                    .enumerate()
                    .map(|(l, &n)| {
                        store.add(
                            format!("{prefix}.bilinear.{l}"),
                            Tensor::randn(&[n, d], bilinear_init_std(), rng),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            layout: layout.clone(),
            width: d,
            weights,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.weights.kind()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> &PatchLayout {
        &self.layout
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights.ids()
    }

    pub fn param_count(&self, store: &ParameterStore) -> usize {
        store.numel_of(&self.param_ids())
    }

    /// For a bilinear tokenizer, the materialized projection of pair `p`:
    /// the Khatri–Rao product of its two network factors.
    pub fn materialized_projection(&self, store: &ParameterStore, p: usize) -> Result<Tensor> {
        let (l, m) = self.layout.pairs()[p];
        match &self.weights {
            Weights::Bilinear(ids) => khatri_rao(store.value(ids[l]), store.value(ids[m])),
            Weights::Specific(ids) => Ok(store.value(ids[p]).clone()),
            Weights::Shared(id) => {
                let (a, b) = self.layout.shapes()[p];
                let w = store.value(*id);
                let rows = a * b;
                Tensor::matrix(rows, self.width, w.data()[..rows * self.width].to_vec())
            }
        }
    }

    /// Tokens for all patches, evaluated directly (no graph).
    pub fn tokenize(&self, store: &ParameterStore, patches: &[Patch]) -> Result<TokenSequence> {
        check_patches(&self.layout, patches)?;
        let d = self.width;
        let mut out = vec![0.0; patches.len() * d];
        for (p, patch) in patches.iter().enumerate() {
            let row = &mut out[p * d..(p + 1) * d];
            match &self.weights {
                Weights::Shared(id) => project_vec(patch.vec(), store.value(*id), row),
                Weights::Specific(ids) => project_vec(patch.vec(), store.value(ids[p]), row),
                Weights::Bilinear(ids) => {
                    let (l, m) = patch.pair();
                    bilinear_token(patch, store.value(ids[l]), store.value(ids[m]), row);
                }
            }
        }
        TokenSequence::new(Tensor::matrix(patches.len(), d, out)?, &self.layout)
    }

    /// Records tokenization on `g`; returns an `n_patch x d` node.
    pub fn tokenize_graph(&self, g: &mut Graph, store: &ParameterStore, patches: &[Patch]) -> Result<Var> {
        check_patches(&self.layout, patches)?;
        match &self.weights {
            Weights::Shared(id) => {
                // Trailing zero padding to s_max; one matmul for all patches.
                let s_max = self.layout.s_max();
                let mut padded = vec![0.0; patches.len() * s_max];
                for (p, patch) in patches.iter().enumerate() {
                    padded[p * s_max..p * s_max + patch.vec().len()].copy_from_slice(patch.vec());
                }
                let x = g.constant(Tensor::matrix(patches.len(), s_max, padded)?);
                let w = g.param(store, *id);
                g.matmul(x, w)
            }
            Weights::Specific(ids) => {
                let mut rows = Vec::with_capacity(patches.len());
                for (patch, &id) in patches.iter().zip(ids) {
                    let x = g.constant(Tensor::matrix(1, patch.vec().len(), patch.vec().to_vec())?);
                    let w = g.param(store, id);
                    rows.push(g.matmul(x, w)?);
                }
                g.concat_rows(&rows)
            }
            Weights::Bilinear(ids) => {
                let mut rows = Vec::with_capacity(patches.len());
                for patch in patches {
                    let (l, m) = patch.pair();
                    let (a, b) = patch.shape();
                    let x = g.constant(Tensor::matrix(a, b, patch.vec().to_vec())?);
                    let ul = g.param(store, ids[l]);
                    let um = g.param(store, ids[m]);
                    let xu = g.matmul(x, um)?;
                    let prod = g.mul(ul, xu)?;
                    rows.push(g.col_sum(prod));
                }
                g.concat_rows(&rows)
            }
        }
    }
}

/// `row = v^T W[..len(v), :]`; rows of `W` past `len(v)` meet zero padding.
fn project_vec(v: &[f64], w: &Tensor, row: &mut [f64]) {
    let d = w.cols();
    for (s, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let wr = &w.data()[s * d..(s + 1) * d];
        for k in 0..d {
            row[k] += x * wr[k];
        }
    }
}

fn bilinear_token(patch: &Patch, ul: &Tensor, um: &Tensor, row: &mut [f64]) {
    let (a, b) = patch.shape();
    let d = ul.cols();
    let mut xu = vec![0.0; d];
    for i in 0..a {
        xu.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..b {
            let x = patch.get(i, j);
            let umj = um.row(j);
            for k in 0..d {
                xu[k] += x * umj[k];
            }
        }
        let uli = ul.row(i);
        for k in 0..d {
            row[k] += uli[k] * xu[k];
        }
    }
}

/// Maps decoder tokens back to patches of the layout.
#[derive(Debug, Clone)]
pub struct Detokenizer {
    layout: PatchLayout,
    width: usize,
    weights: Weights,
}

impl Detokenizer {
    pub fn new(
        kind: TokenizerKind,
        layout: &PatchLayout,
        d: usize,
        store: &mut ParameterStore,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        check_width(d)?;
        let weights = match kind {
            TokenizerKind::Shared => Weights::Shared(store.add(
                format!("{prefix}.shared.weight"),
                Tensor::randn(&[d, layout.s_max()], LINEAR_INIT_STD, rng),
            )),
            TokenizerKind::Specific => Weights::Specific(
                layout
                    .pairs()
                    .iter()
                    .zip(layout.shapes())
                    .map(|(&(l, m), &(a, b))| {
                        store.add(
                            format!("{prefix}.specific.{l}_{m}"),
                            Tensor::randn(&[d, a * b], LINEAR_INIT_STD, rng),
                        )
                    })
                    .collect(),
            ),
            TokenizerKind::Bilinear => Weights::Bilinear(
                layout
                    .network_sizes()
                    .iter()
                    .enumerate()
                    .map(|(l, &n)| {
                        store.add(
                            format!("{prefix}.bilinear.{l}"),
                            Tensor::randn(&[n, d], bilinear_init_std(), rng),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            layout: layout.clone(),
            width: d,
            weights,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.weights.kind()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights.ids()
    }

    pub fn param_count(&self, store: &ParameterStore) -> usize {
        store.numel_of(&self.param_ids())
    }

    /// Decodes token `z` (length `d`) into the block of layout pair `p`.
    pub fn detokenize_one(&self, store: &ParameterStore, p: usize, z: &[f64]) -> Result<Patch> {
        if z.len() != self.width {
            return Err(shape_err!("token width {} but detokenizer width {}", z.len(), self.width));
        }
        let pair = self.layout.pairs()[p];
        let (a, b) = self.layout.shapes()[p];
        let mut out = vec![0.0; a * b];
        match &self.weights {
            Weights::Shared(id) => decode_linear(z, store.value(*id), &mut out),
            Weights::Specific(ids) => decode_linear(z, store.value(ids[p]), &mut out),
            Weights::Bilinear(ids) => {
                let (vl, vm) = (store.value(ids[pair.0]), store.value(ids[pair.1]));
                for i in 0..a {
                    let vli = vl.row(i);
                    for j in 0..b {
                        let vmj = vm.row(j);
                        out[i * b + j] = (0..self.width).map(|k| vli[k] * vmj[k] * z[k]).sum();
                    }
                }
            }
        }
        Patch::from_vec(pair, a, b, out)
    }

    /// Decodes a full token sequence, row `p` into layout pair `p`.
    pub fn detokenize(&self, store: &ParameterStore, tokens: &TokenSequence) -> Result<Vec<Patch>> {
        if tokens.width() != self.width || tokens.len() != self.layout.n_patch() {
            return Err(shape_err!(
                "tokens {}x{} do not fit a {}-patch detokenizer of width {}",
                tokens.len(),
                tokens.width(),
                self.layout.n_patch(),
                self.width
            ));
        }
        (0..tokens.len())
            .map(|p| self.detokenize_one(store, p, tokens.token(p)))
            .collect()
    }

    /// Records decoding of row `r` of `z` into layout pair `pairs[r]`; each
    /// output is a `1 x (|N_l| |N_m|)` node in vec order.
    pub fn detokenize_graph(&self, g: &mut Graph, store: &ParameterStore, z: Var, pairs: &[usize]) -> Result<Vec<Var>> {
        let (rows, width) = (g.value(z).rows(), g.value(z).cols());
        if width != self.width || rows != pairs.len() {
            return Err(shape_err!(
                "decoder tokens {rows}x{width} for {} patches at width {}",
                pairs.len(),
                self.width
            ));
        }
        let mut out = Vec::with_capacity(pairs.len());
        match &self.weights {
            Weights::Shared(id) => {
                let w = g.param(store, *id);
                let full = g.matmul(z, w)?;
                for (r, &p) in pairs.iter().enumerate() {
                    let (a, b) = self.layout.shapes()[p];
                    let row = g.gather_rows(full, &[r])?;
                    out.push(g.slice_cols(row, 0, a * b)?);
                }
            }
            Weights::Specific(ids) => {
                for (r, &p) in pairs.iter().enumerate() {
                    let zr = g.gather_rows(z, &[r])?;
                    let w = g.param(store, ids[p]);
                    out.push(g.matmul(zr, w)?);
                }
            }
            Weights::Bilinear(ids) => {
                for (r, &p) in pairs.iter().enumerate() {
                    let (l, m) = self.layout.pairs()[p];
                    let (a, b) = self.layout.shapes()[p];
                    let zr = g.gather_rows(z, &[r])?;
                    let vl = g.param(store, ids[l]);
                    let vm = g.param(store, ids[m]);
                    let scaled = g.mul_row(vl, zr)?;
                    let block = g.matmul_nt(scaled, vm)?;
                    out.push(g.reshape(block, 1, a * b)?);
                }
            }
        }
        Ok(out)
    }
}

/// `out = z^T W[:, ..len(out)]` (crop of the `d x s` decoding matrix).
fn decode_linear(z: &[f64], w: &Tensor, out: &mut [f64]) {
    let s = w.cols();
    for (k, &zk) in z.iter().enumerate() {
        let wr = &w.data()[k * s..k * s + out.len()];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += zk * wv;
        }
    }
}

/// A standalone tokenizer with its own parameter store, seeded deterministically.
pub fn init_tokenizer(
    kind: TokenizerKind,
    layout: &PatchLayout,
    d: usize,
    seed: u64,
) -> Result<(Tokenizer, ParameterStore)> {
    let mut store = ParameterStore::new();
    let mut rng = rng::stream(seed, rng::domain::INIT, 0);
    let tok = Tokenizer::new(kind, layout, d, &mut store, &mut rng, "tokenizer")?;
    Ok((tok, store))
}
