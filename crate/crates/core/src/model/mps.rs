//! Matrix product state block with one output-carrying site.
//!
//! Every site tensor is stored as `[d, bl, br]` (or `[d, bl, br, m]` at the
//! output site) where `bl`/`br` are the left/right bond extents. The
//! boundary sites have a unit bond on their open side, so their stored shape
//! drops that axis: `[d, beta]` (or `[d, beta, m]`). With that convention the
//! whole chain is a product of matrices and the contraction code has no edge
//! cases.
//!
//! Forward contraction keeps running left and right partial products, each
//! rescaled by its largest absolute entry; the logarithms of those factors
//! are accumulated and re-applied only when forming the final result.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flops;
use crate::model::feature::ORACLE_LIMIT;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpsInit {
    /// Standard deviation of the Gaussian noise added to each identity slice.
    pub noise_std: f64,
    /// Multiplier applied to the identity part of each slice.
    pub gain: f64,
}

impl Default for MpsInit {
    fn default() -> Self {
        MpsInit { noise_std: 1e-2, gain: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpsBlock {
    n_sites: usize,
    feature_dim: usize,
    bond_dim: usize,
    output_dim: usize,
    output_site: usize,
    sites: Vec<Tensor>,
}

/// Intermediate values of one forward contraction, consumed by
/// [`MpsBlock::backward`].
#[derive(Debug, Clone)]
pub struct MpsCache {
    n_sites: usize,
    feature_dim: usize,
    output_dim: usize,
    input: Vec<f64>,
    /// Per-site matrices `M_j = sum_i x[j, i] A_j[i]`.
    mats: Vec<Vec<f64>>,
    /// `left[k]`: normalised product of sites `0..k`; `left[0] = [1]`.
    left: Vec<Vec<f64>>,
    log_left: Vec<f64>,
    /// `right[k]`: normalised product of sites `S-k..S`; `right[0] = [1]`.
    right: Vec<Vec<f64>>,
    log_right: Vec<f64>,
    stabilized: bool,
    log_magnitude: f64,
}

impl MpsCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Natural log of the largest absolute output value (`-inf` for an
    /// all-zero output), computed before the scale factors are re-applied.
    pub fn log_magnitude(&self) -> f64 {
        self.log_magnitude
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Divides `v` by its largest magnitude and returns the log of that factor.
fn normalise(v: &mut [f64]) -> Option<f64> {
    let m = max_abs(v);
    if m == 0.0 || !m.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= m);
    flops::add(v.len());
    Some(m.ln())
}

impl MpsBlock {
    /// Zero-filled block. Requires at least two sites and positive extents.
    pub fn zeros(
        n_sites: usize,
        feature_dim: usize,
        bond_dim: usize,
        output_dim: usize,
        output_site: usize,
    ) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::ConfigError(format!(
                "an MPS block needs at least 2 sites, got {n_sites}"
            )));
        }
        if feature_dim == 0 || bond_dim == 0 || output_dim == 0 {
            return Err(Error::ConfigError(
                "feature, bond and output dimensions must be positive".into(),
            ));
        }
        if output_site >= n_sites {
            return Err(Error::ConfigError(format!(
                "output site {output_site} outside chain of {n_sites} sites"
            )));
        }
        let mut block = MpsBlock {
            n_sites,
            feature_dim,
            bond_dim,
            output_dim,
            output_site,
            sites: Vec::with_capacity(n_sites),
        };
        for j in 0..n_sites {
            let shape = block.site_shape(j);
            block.sites.push(Tensor::zeros(&shape));
        }
        Ok(block)
    }

    /// Identity-plus-noise initialisation: each feature slice of each site is
    /// `gain * I + N(0, noise_std^2)`. Boundary slices use the first unit
    /// vector as their identity, and the output site repeats the identity for
    /// every output component.
    pub fn init_identity<R: Rng + ?Sized>(
        n_sites: usize,
        feature_dim: usize,
        bond_dim: usize,
        output_dim: usize,
        output_site: usize,
        init: MpsInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut block = Self::zeros(n_sites, feature_dim, bond_dim, output_dim, output_site)?;
        let noise = Normal::new(0.0, init.noise_std.max(0.0))
            .map_err(|e| Error::ConfigError(e.to_string()))?;
        for j in 0..n_sites {
            let (bl, br) = block.bonds(j);
            let m = if j == output_site { output_dim } else { 1 };
            let slice = bl * br * m;
            let data = block.sites[j].data_mut();
            for i in 0..feature_dim {
                let s = &mut data[i * slice..(i + 1) * slice];
                for a in 0..bl {
                    for b in 0..br {
                        let diag = if bl == 1 || br == 1 { a == 0 && b == 0 } else { a == b };
                        for o in 0..m {
                            let v = if diag { init.gain } else { 0.0 };
                            s[(a * br + b) * m + o] = v + noise.sample(rng);
                        }
                    }
                }
            }
        }
        Ok(block)
    }

    /// Every entry drawn from `N(0, std^2)`.
    pub fn random<R: Rng + ?Sized>(
        n_sites: usize,
        feature_dim: usize,
        bond_dim: usize,
        output_dim: usize,
        output_site: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut block = Self::zeros(n_sites, feature_dim, bond_dim, output_dim, output_site)?;
        let dist = Normal::new(0.0, std).map_err(|e| Error::ConfigError(e.to_string()))?;
        for t in &mut block.sites {
            t.data_mut().iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Ok(block)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn bond_dim(&self) -> usize {
        self.bond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn output_site(&self) -> usize {
        self.output_site
    }

    pub fn sites(&self) -> &[Tensor] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [Tensor] {
        &mut self.sites
    }

    /// Left and right bond extents of site `j` (1 on an open boundary).
    pub fn bonds(&self, j: usize) -> (usize, usize) {
        let bl = if j == 0 { 1 } else { self.bond_dim };
        let br = if j + 1 == self.n_sites { 1 } else { self.bond_dim };
        (bl, br)
    }

    /// Stored shape of site `j`.
    pub fn site_shape(&self, j: usize) -> Vec<usize> {
        let mut shape = vec![self.feature_dim];
        if j > 0 {
            shape.push(self.bond_dim);
        }
        if j + 1 < self.n_sites {
            shape.push(self.bond_dim);
        }
        if j == self.output_site {
            shape.push(self.output_dim);
        }
        shape
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.sites.iter().map(Tensor::len).sum()
    }

    /// Replaces site `j`, checking its shape.
    pub fn set_site(&mut self, j: usize, tensor: Tensor) -> Result<()> {
        let expect = self.site_shape(j);
        if tensor.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "site {j} expects {expect:?}, got {:?}",
                tensor.shape()
            )));
        }
        self.sites[j] = tensor;
        Ok(())
    }

    fn slice_len(&self, j: usize) -> usize {
        self.sites[j].len() / self.feature_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_sites * self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "MPS expects {} sites of dimension {}, got {} values",
                self.n_sites,
                self.feature_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// `M_j = sum_i x[i] * A_j[i]`.
    fn site_matrix(&self, j: usize, x: &[f64]) -> Vec<f64> {
        let len = self.slice_len(j);
        let data = self.sites[j].data();
        let mut out = vec![0.0; len];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(&data[i * len..(i + 1) * len]) {
                *o += xi * a;
            }
        }
        flops::add(self.feature_dim * len);
        out
    }

    /// Multiplies the represented tensor by `exp(log_factor)`, spreading the
    /// factor evenly over the sites.
    pub fn rescale(&mut self, log_factor: f64) {
        let f = (log_factor / self.n_sites as f64).exp();
        self.sites.iter_mut().for_each(|t| t.scale(f));
    }

    /// Contracts the block against `sites` (`[S, d]`) and returns the
    /// `m` output values with the cache needed for the backward pass.
    pub fn forward(&self, sites: &Tensor) -> Result<(Tensor, MpsCache)> {
        if sites.shape() != [self.n_sites, self.feature_dim] {
            return Err(Error::ShapeMismatch(format!(
                "MPS expects sites [{}, {}], got {:?}",
                self.n_sites,
                self.feature_dim,
                sites.shape()
            )));
        }
        let (out, cache) = self.forward_raw(sites.data(), true)?;
        Ok((Tensor::vector(out), cache))
    }

    /// Forward contraction with optional log-scale stabilisation.
    pub fn forward_raw(&self, x: &[f64], stabilize: bool) -> Result<(Vec<f64>, MpsCache)> {
        self.check_input(x)?;
        let s = self.n_sites;
        let d = self.feature_dim;
        let c = self.output_site;
        let m = self.output_dim;

        let mats: Vec<Vec<f64>> =
            (0..s).map(|j| self.site_matrix(j, &x[j * d..(j + 1) * d])).collect();

        let zero_partial = |side: &str, j: usize| Error::NumericalError {
            location: format!("{side} partial product at site {j}"),
            detail: "partial product is zero or non-finite".into(),
        };

        let mut left = Vec::with_capacity(c + 1);
        let mut log_left = Vec::with_capacity(c + 1);
        left.push(vec![1.0]);
        log_left.push(0.0);
        for j in 0..c {
            let (bl, br) = self.bonds(j);
            let prev = &left[j];
            let mut next = vec![0.0; br];
            for a in 0..bl {
                let pa = prev[a];
                for b in 0..br {
                    next[b] += pa * mats[j][a * br + b];
                }
            }
            flops::add(bl * br);
            let mut log = log_left[j];
            if stabilize {
                log += normalise(&mut next).ok_or_else(|| zero_partial("left", j))?;
            }
            left.push(next);
            log_left.push(log);
        }

        let mut right = Vec::with_capacity(s - c);
        let mut log_right = Vec::with_capacity(s - c);
        right.push(vec![1.0]);
        log_right.push(0.0);
        for j in (c + 1..s).rev() {
            let (bl, br) = self.bonds(j);
            let k = s - 1 - j;
            let prev = &right[k];
            let mut next = vec![0.0; bl];
            for a in 0..bl {
                next[a] = (0..br).map(|b| mats[j][a * br + b] * prev[b]).sum();
            }
            flops::add(bl * br);
            let mut log = log_right[k];
            if stabilize {
                log += normalise(&mut next).ok_or_else(|| zero_partial("right", j))?;
            }
            right.push(next);
            log_right.push(log);
        }

        let (bl, br) = self.bonds(c);
        let le = &left[c];
        let re = &right[s - 1 - c];
        let mc = &mats[c];
        let mut out = vec![0.0; m];
        for a in 0..bl {
            for b in 0..br {
                let w = le[a] * re[b];
                let row = &mc[(a * br + b) * m..(a * br + b + 1) * m];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        flops::add(bl * br * (m + 1));
        let log_scale = log_left[c] + log_right[s - 1 - c];
        let log_magnitude = log_scale + max_abs(&out).ln();
        let f = log_scale.exp();
        out.iter_mut().for_each(|v| *v *= f);
        flops::add(m);

        let cache = MpsCache {
            n_sites: s,
            feature_dim: d,
            output_dim: m,
            input: x.to_vec(),
            mats,
            left,
            log_left,
            right,
            log_right,
            stabilized: stabilize,
            log_magnitude,
        };
        Ok((out, cache))
    }

    fn check_cache(&self, cache: &MpsCache) -> Result<()> {
        if cache.n_sites != self.n_sites
            || cache.feature_dim != self.feature_dim
            || cache.output_dim != self.output_dim
            || cache.left.len() != self.output_site + 1
        {
            return Err(Error::CacheMismatch(format!(
                "cache for ({} sites, d={}, m={}) used with block ({} sites, d={}, m={})",
                cache.n_sites,
                cache.feature_dim,
                cache.output_dim,
                self.n_sites,
                self.feature_dim,
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Gradients of `sum_o grad_out[o] * out[o]` with respect to every site
    /// tensor and the input features.
    pub fn backward(&self, cache: &MpsCache, grad_out: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut grads: Vec<Tensor> = self.sites.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut gx = vec![0.0; self.n_sites * self.feature_dim];
        self.backward_into(cache, grad_out.data(), &mut grads, &mut gx)?;
        let gx = Tensor::new(vec![self.n_sites, self.feature_dim], gx)?;
        Ok((grads, gx))
    }

    /// Accumulates site gradients into `grad_sites` and writes the input
    /// gradient into `grad_input` (overwriting it).
    pub fn backward_into(
        &self,
        cache: &MpsCache,
        grad_out: &[f64],
        grad_sites: &mut [Tensor],
        grad_input: &mut [f64],
    ) -> Result<()> {
        self.check_cache(cache)?;
        if grad_out.len() != self.output_dim {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient has {} entries, block emits {}",
                grad_out.len(),
                self.output_dim
            )));
        }
        if grad_sites.len() != self.n_sites || grad_input.len() != self.n_sites * self.feature_dim
        {
            return Err(Error::CacheMismatch("gradient buffers have wrong size".into()));
        }
        let s = self.n_sites;
        let c = self.output_site;
        let m = self.output_dim;
        let stab = cache.stabilized;

        let mut grad_mats: Vec<Vec<f64>> = Vec::with_capacity(s);
        grad_mats.resize_with(s, Vec::new);

        // output site
        let (bl, br) = self.bonds(c);
        let le = &cache.left[c];
        let re = &cache.right[s - 1 - c];
        let mc = &cache.mats[c];
        let mut mt = vec![0.0; bl * br];
        for (ab, t) in mt.iter_mut().enumerate() {
            *t = (0..m).map(|o| mc[ab * m + o] * grad_out[o]).sum();
        }
        // fold the upstream magnitude into the exponent so a tiny gradient
        // times a huge scale cannot overflow
        let gmax = max_abs(grad_out);
        let mut gc = vec![0.0; bl * br * m];
        if gmax > 0.0 {
            let f = (cache.log_left[c] + cache.log_right[s - 1 - c] + gmax.ln()).exp();
            for a in 0..bl {
                for b in 0..br {
                    let w = le[a] * re[b] * f;
                    for o in 0..m {
                        gc[(a * br + b) * m + o] = w * (grad_out[o] / gmax);
                    }
                }
            }
        }
        grad_mats[c] = gc;

        // sweep leftwards from the output site
        let mut v: Vec<f64> = (0..bl).map(|a| (0..br).map(|b| mt[a * br + b] * re[b]).sum()).collect();
        let mut log_v = cache.log_right[s - 1 - c];
        if stab {
            log_v += normalise(&mut v).unwrap_or(0.0);
        }
        for j in (0..c).rev() {
            let (jl, jr) = self.bonds(j);
            let env = &cache.left[j];
            let f = (cache.log_left[j] + log_v).exp();
            let mut g = vec![0.0; jl * jr];
            for a in 0..jl {
                for b in 0..jr {
                    g[a * jr + b] = env[a] * v[b] * f;
                }
            }
            grad_mats[j] = g;
            if j > 0 {
                let mj = &cache.mats[j];
                let mut nv = vec![0.0; jl];
                for a in 0..jl {
                    nv[a] = (0..jr).map(|b| mj[a * jr + b] * v[b]).sum();
                }
                if stab {
                    if let Some(l) = normalise(&mut nv) {
                        log_v += l;
                    }
                }
                v = nv;
            }
        }

        // sweep rightwards from the output site
        let mut u: Vec<f64> = (0..br).map(|b| (0..bl).map(|a| le[a] * mt[a * br + b]).sum()).collect();
        let mut log_u = cache.log_left[c];
        if stab {
            log_u += normalise(&mut u).unwrap_or(0.0);
        }
        for j in c + 1..s {
            let (jl, jr) = self.bonds(j);
            let k = s - 1 - j;
            let env = &cache.right[k];
            let f = (log_u + cache.log_right[k]).exp();
            let mut g = vec![0.0; jl * jr];
            for a in 0..jl {
                for b in 0..jr {
                    g[a * jr + b] = u[a] * env[b] * f;
                }
            }
            grad_mats[j] = g;
            if j + 1 < s {
                let mj = &cache.mats[j];
                let mut nu = vec![0.0; jr];
                for a in 0..jl {
                    for b in 0..jr {
                        nu[b] += u[a] * mj[a * jr + b];
                    }
                }
                if stab {
                    if let Some(l) = normalise(&mut nu) {
                        log_u += l;
                    }
                }
                u = nu;
            }
        }

        // chain through M_j = sum_i x_i A_j[i]
        let d = self.feature_dim;
        for j in 0..s {
            let len = self.slice_len(j);
            let gm = &grad_mats[j];
            let x = &cache.input[j * d..(j + 1) * d];
            let a = self.sites[j].data();
            let ga = grad_sites[j].data_mut();
            for i in 0..d {
                let xi = x[i];
                let slice = &a[i * len..(i + 1) * len];
                let gslice = &mut ga[i * len..(i + 1) * len];
                let mut dot = 0.0;
                for ((g, &av), &gv) in gslice.iter_mut().zip(slice).zip(gm) {
                    *g += xi * gv;
                    dot += av * gv;
                }
                grad_input[j * d + i] = dot;
            }
        }
        Ok(())
    }

    /// Assembles the full weight tensor `[d; S] x m` by pairwise
    /// contraction. Only for small blocks (at most 2^20 entries).
    pub fn to_full_tensor(&self) -> Result<Tensor> {
        let size = (self.feature_dim as u128).pow(self.n_sites as u32) * self.output_dim as u128;
        if size > ORACLE_LIMIT {
            return Err(Error::SizeLimit { size, limit: ORACLE_LIMIT });
        }
        #[derive(Clone, Copy, PartialEq)]
        enum Axis {
            Phys(usize),
            Bond,
            Out,
        }
        let labels_of = |j: usize| -> Vec<Axis> {
            let mut l = vec![Axis::Phys(j)];
            if j > 0 {
                l.push(Axis::Bond);
            }
            if j + 1 < self.n_sites {
                l.push(Axis::Bond);
            }
            if j == self.output_site {
                l.push(Axis::Out);
            }
            l
        };
        let mut acc = self.sites[0].clone();
        let mut labels = labels_of(0);
        for j in 1..self.n_sites {
            let pos = labels.iter().position(|&l| l == Axis::Bond).expect("open bond");
            acc = acc.contract_index(pos, &self.sites[j], 1)?;
            labels.remove(pos);
            let mut next = labels_of(j);
            next.remove(1);
            labels.extend(next);
        }
        let mut order: Vec<usize> = (0..self.n_sites)
            .map(|j| labels.iter().position(|&l| l == Axis::Phys(j)).expect("physical axis"))
            .collect();
        order.push(labels.iter().position(|&l| l == Axis::Out).expect("output axis"));
        Ok(acc.permute(&order))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::feature::joint_feature_map_oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_sites(rng: &mut ChaCha8Rng, s: usize, d: usize) -> Tensor {
        let data = (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![s, d], data).unwrap()
    }

    /// Independent contraction: dense weight tensor against the dense joint map.
    fn oracle_logits(block: &MpsBlock, x: &Tensor) -> Vec<f64> {
        let theta = block.to_full_tensor().unwrap();
        let vecs: Vec<Tensor> = (0..block.n_sites()).map(|j| Tensor::vector(x.row(j).to_vec())).collect();
        let phi = joint_feature_map_oracle(&vecs).unwrap();
        let m = block.output_dim();
        let flat = theta.reshape(&[phi.len(), m]).unwrap();
        (0..m).map(|o| (0..phi.len()).map(|p| flat.get(&[p, o]) * phi.data()[p]).sum()).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
        num / den
    }

    #[test]
    fn site_shapes_follow_convention() {
        let b = MpsBlock::zeros(4, 2, 3, 2, 2).unwrap();
        assert_eq!(b.site_shape(0), vec![2, 3]);
        assert_eq!(b.site_shape(1), vec![2, 3, 3]);
        assert_eq!(b.site_shape(2), vec![2, 3, 3, 2]);
        assert_eq!(b.site_shape(3), vec![2, 3]);
        assert_eq!(b.param_count(), 66);
        let edge = MpsBlock::zeros(3, 2, 3, 4, 0).unwrap();
        assert_eq!(edge.site_shape(0), vec![2, 3, 4]);
    }

    #[test]
    fn invalid_blocks_rejected() {
        assert!(MpsBlock::zeros(1, 2, 2, 2, 0).is_err());
        assert!(MpsBlock::zeros(3, 2, 2, 2, 3).is_err());
        assert!(MpsBlock::zeros(3, 0, 2, 2, 1).is_err());
    }

    #[test]
    fn param_count_bond_one() {
        let b = MpsBlock::zeros(5, 3, 1, 1, 2).unwrap();
        assert_eq!(b.param_count(), 15);
    }

    #[test]
    fn param_count_slope_per_interior_site() {
        for s in 3..10 {
            let a = MpsBlock::zeros(s, 3, 4, 2, 1).unwrap().param_count();
            let b = MpsBlock::zeros(s + 1, 3, 4, 2, 1).unwrap().param_count();
            assert_eq!(b - a, 3 * 16);
        }
    }

    fn identity_chain(s: usize, d: usize, beta: usize, m: usize) -> MpsBlock {
        let mut block = MpsBlock::zeros(s, d, beta, m, s / 2).unwrap();
        for j in 0..s {
            let (bl, br) = block.bonds(j);
            let mo = if j == s / 2 { m } else { 1 };
            let data = block.sites_mut()[j].data_mut();
            // only feature 0 carries the identity
            for a in 0..bl {
                for b in 0..br {
                    let diag = if bl == 1 || br == 1 { a == 0 && b == 0 } else { a == b };
                    if diag {
                        data[(a * br + b) * mo] = 1.0;
                    }
                }
            }
        }
        block
    }

    #[test]
    fn identity_chain_emits_first_unit_vector() {
        let block = identity_chain(5, 2, 3, 3);
        let mut x = Tensor::zeros(&[5, 2]);
        for j in 0..5 {
            x.set(&[j, 0], 1.0);
            x.set(&[j, 1], 0.37 * j as f64);
        }
        let (out, _) = block.forward(&x).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_full_tensor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for c in 0..3 {
            let block = MpsBlock::random(3, 2, 2, 2, c, 1.0, &mut rng).unwrap();
            let x = rand_sites(&mut rng, 3, 2);
            let (out, _) = block.forward(&x).unwrap();
            assert!(rel_err(out.data(), &oracle_logits(&block, &x)) < 1e-10);
        }
    }

    #[test]
    fn bond_one_full_tensor_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = MpsBlock::random(2, 3, 1, 2, 1, 1.0, &mut rng).unwrap();
        let theta = block.to_full_tensor().unwrap();
        assert_eq!(theta.shape(), &[3, 3, 2]);
        let a0 = block.sites()[0].data();
        let a1 = block.sites()[1].data();
        for i in 0..3 {
            for k in 0..3 {
                for o in 0..2 {
                    assert!((theta.get(&[i, k, o]) - a0[i] * a1[k * 2 + o]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_chain_full_tensor() {
        let block = identity_chain(3, 2, 2, 2);
        let theta = block.to_full_tensor().unwrap();
        assert_eq!(theta.get(&[0, 0, 0, 0]), 1.0);
        assert_eq!(theta.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn full_tensor_size_limit() {
        let block = MpsBlock::zeros(21, 2, 1, 1, 0).unwrap();
        assert!(matches!(block.to_full_tensor(), Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn scaling_a_site_scales_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut block = MpsBlock::random(6, 3, 3, 2, 3, 1.0, &mut rng).unwrap();
        let x = rand_sites(&mut rng, 6, 3);
        let (base, _) = block.forward(&x).unwrap();
        block.sites_mut()[1].scale(2.5);
        let (scaled, _) = block.forward(&x).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stabilisation_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = MpsBlock::random(12, 2, 4, 3, 6, 0.8, &mut rng).unwrap();
        let x = rand_sites(&mut rng, 12, 2);
        let (a, _) = block.forward_raw(x.data(), true).unwrap();
        let (b, _) = block.forward_raw(x.data(), false).unwrap();
        assert!(rel_err(&a, &b) < 1e-10);
    }

    #[test]
    fn zero_partial_reported() {
        let block = MpsBlock::zeros(4, 2, 2, 2, 2).unwrap();
        let x = Tensor::filled(&[4, 2], 1.0);
        assert!(matches!(block.forward(&x), Err(Error::NumericalError { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = MpsBlock::random(4, 2, 2, 2, 2, 1.0, &mut rng).unwrap();
        let x = rand_sites(&mut rng, 4, 2);
        let (_, cache) = block.forward(&x).unwrap();
        let (gs, gx) = block.backward(&cache, &Tensor::zeros(&[2])).unwrap();
        assert!(gs.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    fn loss(block: &MpsBlock, x: &Tensor, g: &[f64]) -> f64 {
        let (out, _) = block.forward(x).unwrap();
        out.data().iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn site_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for c in 0..3 {
            let mut block = MpsBlock::random(3, 2, 2, 2, c, 1.0, &mut rng).unwrap();
            let x = rand_sites(&mut rng, 3, 2);
            let g = vec![0.7, -1.3];
            let (_, cache) = block.forward(&x).unwrap();
            let (grads, _) = block.backward(&cache, &Tensor::vector(g.clone())).unwrap();
            let h = 1e-5;
            for j in 0..3 {
                for p in 0..block.sites()[j].len() {
                    let orig = block.sites()[j].data()[p];
                    block.sites_mut()[j].data_mut()[p] = orig + h;
                    let up = loss(&block, &x, &g);
                    block.sites_mut()[j].data_mut()[p] = orig - h;
                    let dn = loss(&block, &x, &g);
                    block.sites_mut()[j].data_mut()[p] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let an = grads[j].data()[p];
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-1), "site {j} p {p}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let block = identity_chain(4, 2, 2, 2);
        let mut block2 = block.clone();
        // perturb so the gradient is not trivially sparse
        for t in block2.sites_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        for b in [&block, &block2] {
            let mut x = rand_sites(&mut rng, 4, 2);
            let g = [1.0, 0.5];
            let (_, cache) = b.forward(&x).unwrap();
            let (_, gx) = b.backward(&cache, &Tensor::vector(g.to_vec())).unwrap();
            let h = 1e-5;
            for p in 0..8 {
                let orig = x.data()[p];
                x.data_mut()[p] = orig + h;
                let up = loss(b, &x, &g);
                x.data_mut()[p] = orig - h;
                let dn = loss(b, &x, &g);
                x.data_mut()[p] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - gx.data()[p]).abs() < 1e-8, "{fd} vs {}", gx.data()[p]);
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = MpsBlock::random(4, 2, 2, 2, 2, 1.0, &mut rng).unwrap();
        let b = MpsBlock::random(5, 2, 2, 2, 2, 1.0, &mut rng).unwrap();
        let (_, cache) = a.forward(&rand_sites(&mut rng, 4, 2)).unwrap();
        assert!(matches!(b.backward(&cache, &Tensor::zeros(&[2])), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn long_chain_stays_finite_with_identity_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = MpsBlock::init_identity(512, 4, 3, 2, 256, MpsInit { noise_std: 1e-2, gain: 0.5 }, &mut rng).unwrap();
        let x = Tensor::new(vec![512, 4], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (out, cache) = block.forward(&x).unwrap();
        assert!(out.is_finite());
        let (gs, gx) = block.backward(&cache, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert!(gs.iter().all(Tensor::is_finite));
        assert!(gx.is_finite());
    }
}
