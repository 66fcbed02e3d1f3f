//! Domain-confusion loss: a set discriminator learns to tell whether two
//! sub-packs of content codes come from the same pack, and the encoders are
//! trained to defeat it.
//!
//! `eta(a, b) = D(sum_k H(a_k), sum_l H(b_l))`. Sum pooling (rather than the
//! mean) lets the head see sub-pack sizes.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::nn::{prefix_muts, prefix_refs, Mlp, MlpCache, ParamMut, ParamRef, Parameterized, Real};

/// Element encoder `H` and verification head `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub element: Mlp<T>,
    pub head: Mlp<T>,
}

impl<T: Real> DiscriminatorParams<T> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let element = Mlp::new(arch.content_dim(), &arch.disc_element, true, rng);
        let mut widths = arch.disc_head.clone();
        widths.push(1);
        let head = Mlp::new(2 * element.outputs(), &widths, false, rng);
        DiscriminatorParams { element, head }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            element: self.element.map(&f),
            head: self.head.map(&f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn cast<U: Real>(&self) -> DiscriminatorParams<U> {
        self.map(|v| U::from(v).expect("cast"))
    }

    fn pooled_width(&self) -> usize {
        self.element.outputs()
    }
}

impl<T: Real> Parameterized<T> for DiscriminatorParams<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = prefix_refs("element", self.element.params());
        v.extend(prefix_refs("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = prefix_muts("element", self.element.params_mut());
        v.extend(prefix_muts("head", self.head.params_mut()));
        v
    }
}

/// Sub-pack sizes for one pair of packs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub a_i: usize,
    pub b_i: usize,
    pub a_j: usize,
    pub b_j: usize,
}

/// Row indices of one pack assigned to each side of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl SplitAssignment {
    /// Both sides nonempty, disjoint, covering `0..k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        if self.a.is_empty() || self.b.is_empty() {
            return Err(Error::Argument("split side is empty".into()));
        }
        for &i in self.a.iter().chain(&self.b) {
            if i >= k || seen[i] {
                return Err(Error::Argument(format!("split index {i} invalid for pack of {k}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Argument("split does not cover the pack".into()));
        }
        Ok(())
    }
}

/// Size of side A uniform on `1..=k-1`; members chosen by a random permutation.
pub fn draw_split<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<SplitAssignment> {
    if k < 2 {
        return Err(Error::Argument(format!("cannot split a pack of {k} into two nonempty parts")));
    }
    let a_len = rng.random_range(1..k);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let b = order.split_off(a_len);
    Ok(SplitAssignment { a: order, b })
}

/// Split with a fixed side-A size.
pub fn draw_split_sized<R: Rng + ?Sized>(k: usize, a_len: usize, rng: &mut R) -> Result<SplitAssignment> {
    if a_len == 0 || a_len >= k {
        return Err(Error::Argument(format!("side size {a_len} invalid for pack of {k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let b = order.split_off(a_len);
    Ok(SplitAssignment { a: order, b })
}

/// Random split of a `[K, S_C]` block of content codes into two sub-packs.
pub fn split_pack<T: Real, R: Rng + ?Sized>(
    contents: &Array2<T>,
    rng: &mut R,
) -> Result<(Array2<T>, Array2<T>, SplitAssignment)> {
    let split = draw_split(contents.nrows(), rng)?;
    let a = contents.select(Axis(0), &split.a);
    let b = contents.select(Axis(0), &split.b);
    Ok((a, b, split))
}

/// `log(sigmoid(t))` without overflow.
pub fn log_sigmoid<T: Real>(t: T) -> T {
    -softplus(-t)
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus<T: Real>(t: T) -> T {
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

fn check_codes<T: Real>(params: &DiscriminatorParams<T>, x: &Array2<T>, what: &str) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Argument(format!("{what} is empty")));
    }
    if x.ncols() != params.element.layers[0].inputs() {
        return Err(Error::Shape(format!(
            "{what} codes have {} entries, discriminator expects {}",
            x.ncols(),
            params.element.layers[0].inputs()
        )));
    }
    Ok(())
}

/// Verification logit for the sub-pack pair `(a, b)`.
pub fn discriminate<T: Real>(params: &DiscriminatorParams<T>, a: &Array2<T>, b: &Array2<T>) -> Result<T> {
    check_codes(params, a, "sub-pack a")?;
    check_codes(params, b, "sub-pack b")?;
    let sa = params.element.forward(a).0.sum_axis(Axis(0));
    let sb = params.element.forward(b).0.sum_axis(Axis(0));
    let joined = concatenate(Axis(0), &[sa.view(), sb.view()])
        .expect("pooled widths")
        .insert_axis(Axis(0));
    Ok(params.head.forward(&joined).0[[0, 0]])
}

/// Gradient of `discriminate` w.r.t. both sub-packs; accumulates parameter
/// gradients into `grad`.
pub fn discriminate_backward<T: Real>(
    params: &DiscriminatorParams<T>,
    a: &Array2<T>,
    b: &Array2<T>,
    grad: &mut DiscriminatorParams<T>,
) -> (Array2<T>, Array2<T>) {
    let (ha, ca) = params.element.forward(a);
    let (hb, cb) = params.element.forward(b);
    let joined = concatenate(Axis(0), &[ha.sum_axis(Axis(0)).view(), hb.sum_axis(Axis(0)).view()])
        .expect("pooled widths")
        .insert_axis(Axis(0));
    let (_, head_cache) = params.head.forward(&joined);
    let dj = params.head.backward(&head_cache, Array2::ones((1, 1)), &mut grad.head);
    let w = params.pooled_width();
    let da_pool = dj.slice(s![0, ..w]).to_owned();
    let db_pool = dj.slice(s![0, w..]).to_owned();
    let da = params.element.backward(&ca, broadcast_rows(&da_pool, a.nrows()), &mut grad.element);
    let db = params.element.backward(&cb, broadcast_rows(&db_pool, b.nrows()), &mut grad.element);
    (da, db)
}

fn broadcast_rows<T: Real>(row: &Array1<T>, n: usize) -> Array2<T> {
    row.broadcast((n, row.len())).expect("broadcast").to_owned()
}

/// Index of each discriminator logit in [`DcForward::logits`].
pub const REAL_I: usize = 0;
pub const REAL_J: usize = 1;
pub const FAKE_A: usize = 2;
pub const FAKE_B: usize = 3;

/// Result of evaluating the loss, with what is needed for the backward pass.
pub struct DcForward<T> {
    /// `log s(r_i) + log s(r_j) + log(1 - s(f_a)) + log(1 - s(f_b))`, always `<= 0`.
    pub value: T,
    /// Logits of `(a_i, b_i)`, `(a_j, b_j)`, `(a_i, a_j)`, `(b_i, b_j)`.
    pub logits: [T; 4],
    pub plan: SplitPlan,
    split_i: SplitAssignment,
    split_j: SplitAssignment,
    k_i: usize,
    k_j: usize,
    element: MlpCache<T>,
    encoded: Array2<T>,
    head: MlpCache<T>,
}

/// Draws splits for both packs and evaluates the loss.
pub fn dom_conf_loss<T: Real, R: Rng + ?Sized>(
    params: &DiscriminatorParams<T>,
    o_i: &Array2<T>,
    o_j: &Array2<T>,
    rng: &mut R,
) -> Result<DcForward<T>> {
    let split_i = draw_split(o_i.nrows(), rng)?;
    let split_j = draw_split(o_j.nrows(), rng)?;
    dom_conf_loss_with(params, o_i, o_j, split_i, split_j)
}

/// Loss for given splits. Every element goes through `H` in one batch and
/// the four pairs go through `D` in another.
pub fn dom_conf_loss_with<T: Real>(
    params: &DiscriminatorParams<T>,
    o_i: &Array2<T>,
    o_j: &Array2<T>,
    split_i: SplitAssignment,
    split_j: SplitAssignment,
) -> Result<DcForward<T>> {
    check_codes(params, o_i, "pack i")?;
    check_codes(params, o_j, "pack j")?;
    let (k_i, k_j) = (o_i.nrows(), o_j.nrows());
    split_i.validate(k_i)?;
    split_j.validate(k_j)?;
    let all = concatenate(Axis(0), &[o_i.view(), o_j.view()]).expect("code widths");
    let (encoded, element) = params.element.forward(&all);
    let pool = |rows: &[usize], offset: usize| -> Array1<T> {
        let mut acc = Array1::zeros(encoded.ncols());
        for &r in rows {
            acc += &encoded.row(offset + r);
        }
        acc
    };
    let a_i = pool(&split_i.a, 0);
    let b_i = pool(&split_i.b, 0);
    let a_j = pool(&split_j.a, k_i);
    let b_j = pool(&split_j.b, k_i);
    let w = encoded.ncols();
    let mut pairs = Array2::zeros((4, 2 * w));
    for (row, (l, r)) in [(&a_i, &b_i), (&a_j, &b_j), (&a_i, &a_j), (&b_i, &b_j)].into_iter().enumerate() {
        pairs.slice_mut(s![row, ..w]).assign(l);
        pairs.slice_mut(s![row, w..]).assign(r);
    }
    let (out, head) = params.head.forward(&pairs);
    let logits = [out[[0, 0]], out[[1, 0]], out[[2, 0]], out[[3, 0]]];
    let value = log_sigmoid(logits[REAL_I]) + log_sigmoid(logits[REAL_J]) - softplus(logits[FAKE_A])
        - softplus(logits[FAKE_B]);
    let plan = SplitPlan {
        a_i: split_i.a.len(),
        b_i: split_i.b.len(),
        a_j: split_j.a.len(),
        b_j: split_j.b.len(),
    };
    Ok(DcForward {
        value,
        logits,
        plan,
        split_i,
        split_j,
        k_i,
        k_j,
        element,
        encoded,
        head,
    })
}

/// Gradient of the loss value w.r.t. both code blocks. Parameter gradients
/// of the same quantity are accumulated into `grad`.
pub fn dom_conf_backward<T: Real>(
    params: &DiscriminatorParams<T>,
    fwd: &DcForward<T>,
    grad: &mut DiscriminatorParams<T>,
) -> (Array2<T>, Array2<T>) {
    let l = &fwd.logits;
    let mut dlogits = Array2::zeros((4, 1));
    dlogits[[REAL_I, 0]] = sigmoid(-l[REAL_I]);
    dlogits[[REAL_J, 0]] = sigmoid(-l[REAL_J]);
    dlogits[[FAKE_A, 0]] = -sigmoid(l[FAKE_A]);
    dlogits[[FAKE_B, 0]] = -sigmoid(l[FAKE_B]);
    let dpairs = params.head.backward(&fwd.head, dlogits, &mut grad.head);
    let w = fwd.encoded.ncols();
    let left = |r: usize| dpairs.slice(s![r, ..w]).to_owned();
    let right = |r: usize| dpairs.slice(s![r, w..]).to_owned();
    let d_ai = left(REAL_I) + left(FAKE_A);
    let d_bi = right(REAL_I) + left(FAKE_B);
    let d_aj = left(REAL_J) + right(FAKE_A);
    let d_bj = right(REAL_J) + right(FAKE_B);
    let mut dencoded = Array2::zeros(fwd.encoded.dim());
    let mut scatter = |rows: &[usize], offset: usize, d: &Array1<T>| {
        for &r in rows {
            dencoded.row_mut(offset + r).assign(d);
        }
    };
    scatter(&fwd.split_i.a, 0, &d_ai);
    scatter(&fwd.split_i.b, 0, &d_bi);
    scatter(&fwd.split_j.a, fwd.k_i, &d_aj);
    scatter(&fwd.split_j.b, fwd.k_i, &d_bj);
    let dall = params.element.backward(&fwd.element, dencoded, &mut grad.element);
    let d_i = dall.slice(s![..fwd.k_i, ..]).to_owned();
    let d_j = dall.slice(s![fwd.k_i.., ..]).to_owned();
    debug_assert_eq!(d_j.nrows(), fwd.k_j);
    (d_i, d_j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatentConfig;
    use crate::rng::rng_for;
    use rand_distr::{Distribution, StandardNormal};

    fn arch(content: usize) -> Architecture {
        Architecture {
            latent: LatentConfig {
                domain_dim: 2,
                content_dim: content,
            },
            disc_element: vec![6, 8],
            disc_head: vec![8, 5, 4],
            ..Architecture::published(16, 16, 1)
        }
    }

    fn codes(k: usize, d: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_fn((k, d), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn widths_match_published_layout() {
        let d = DiscriminatorParams::<f32>::new(&Architecture::published(32, 32, 3), &mut rng_for(0, "init"));
        let widths: Vec<usize> = d.element.layers.iter().map(|l| l.outputs()).collect();
        assert_eq!(widths, vec![64, 128]);
        assert_eq!(d.head.layers[0].inputs(), 2 * 128);
        let widths: Vec<usize> = d.head.layers.iter().map(|l| l.outputs()).collect();
        assert_eq!(widths, vec![128, 64, 32, 1]);
    }

    #[test]
    fn two_element_pack_splits_one_one() {
        let mut rng = rng_for(1, "split");
        for _ in 0..100 {
            let s = draw_split(2, &mut rng).unwrap();
            assert_eq!((s.a.len(), s.b.len()), (1, 1));
        }
        assert!(matches!(draw_split(1, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn split_sizes_are_uniform() {
        let mut rng = rng_for(2, "split");
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let s = draw_split(10, &mut rng).unwrap();
            s.validate(10).unwrap();
            counts[s.a.len()] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / n as f64 - 1.0 / 9.0).abs() <= 0.02);
        }
    }

    #[test]
    fn zero_head_gives_four_log_halves() {
        let mut d = DiscriminatorParams::<f64>::new(&arch(3), &mut rng_for(3, "init"));
        let last = d.head.layers.len() - 1;
        d.head.layers[last] = d.head.layers[last].map(|_| 0.0);
        let mut rng = rng_for(3, "codes");
        let (oi, oj) = (codes(5, 3, &mut rng), codes(7, 3, &mut rng));
        let f = dom_conf_loss(&d, &oi, &oj, &mut rng).unwrap();
        assert!((f.value - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((f.value + 2.772_588_722_239_781).abs() < 1e-12);
    }

    #[test]
    fn identical_packs_pair_real_and_fake() {
        let d = DiscriminatorParams::<f64>::new(&arch(3), &mut rng_for(4, "init"));
        let mut rng = rng_for(4, "codes");
        let o = codes(6, 3, &mut rng);
        let split = draw_split(6, &mut rng).unwrap();
        let f = dom_conf_loss_with(&d, &o, &o, split.clone(), split).unwrap();
        let t = f.logits[REAL_I];
        assert_eq!(f.logits[REAL_J], t);
        let expected = log_sigmoid(t) + log_sigmoid(t) - softplus(f.logits[FAKE_A]) - softplus(f.logits[FAKE_B]);
        assert!((f.value - expected).abs() < 1e-12);
        assert!(f.value <= 0.0);
    }

    #[test]
    fn stable_forms_survive_extremes() {
        assert_eq!(log_sigmoid(1000.0f64), 0.0);
        assert!((log_sigmoid(-1000.0f64) + 1000.0).abs() < 1e-9);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn sum_pooling_sees_duplicates() {
        let d = DiscriminatorParams::<f64>::new(&arch(3), &mut rng_for(5, "init"));
        let mut rng = rng_for(5, "codes");
        let a = codes(3, 3, &mut rng);
        let b = codes(2, 3, &mut rng);
        let doubled = concatenate(Axis(0), &[a.view(), a.view()]).unwrap();
        let x = discriminate(&d, &a, &b).unwrap();
        let y = discriminate(&d, &doubled, &b).unwrap();
        assert!((x - y).abs() > 1e-9);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let d = DiscriminatorParams::<f64>::new(&arch(3), &mut rng_for(6, "init"));
        let mut rng = rng_for(6, "codes");
        let a = codes(3, 3, &mut rng);
        let b = codes(4, 3, &mut rng);
        let mut g = d.zeros_like();
        let (da, db) = discriminate_backward(&d, &a, &b, &mut g);
        let h = 1e-6;
        for (which, grad) in [(0, &da), (1, &db)] {
            let base = if which == 0 { &a } else { &b };
            for r in 0..base.nrows() {
                for c in 0..3 {
                    let mut p = base.clone();
                    p[[r, c]] += h;
                    let mut m = base.clone();
                    m[[r, c]] -= h;
                    let eval = |x: &Array2<f64>| {
                        if which == 0 {
                            discriminate(&d, x, &b).unwrap()
                        } else {
                            discriminate(&d, &a, x).unwrap()
                        }
                    };
                    let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                    let an = grad[[r, c]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    assert!(rel <= 1e-4, "{which} {r} {c}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let d = DiscriminatorParams::<f64>::new(&arch(2), &mut rng_for(7, "init"));
        let mut rng = rng_for(7, "codes");
        let oi = codes(4, 2, &mut rng);
        let oj = codes(5, 2, &mut rng);
        let si = draw_split(4, &mut rng).unwrap();
        let sj = draw_split(5, &mut rng).unwrap();
        let f = dom_conf_loss_with(&d, &oi, &oj, si.clone(), sj.clone()).unwrap();
        let mut g = d.zeros_like();
        let (di, dj) = dom_conf_backward(&d, &f, &mut g);
        let h = 1e-6;
        let eval = |a: &Array2<f64>, b: &Array2<f64>| dom_conf_loss_with(&d, a, b, si.clone(), sj.clone()).unwrap().value;
        for r in 0..4 {
            for c in 0..2 {
                let mut p = oi.clone();
                p[[r, c]] += h;
                let mut m = oi.clone();
                m[[r, c]] -= h;
                let fd = (eval(&p, &oj) - eval(&m, &oj)) / (2.0 * h);
                assert!((fd - di[[r, c]]).abs() <= 1e-4 * fd.abs().max(di[[r, c]].abs()).max(1e-6));
            }
        }
        for r in 0..5 {
            for c in 0..2 {
                let mut p = oj.clone();
                p[[r, c]] += h;
                let mut m = oj.clone();
                m[[r, c]] -= h;
                let fd = (eval(&oi, &p) - eval(&oi, &m)) / (2.0 * h);
                assert!((fd - dj[[r, c]]).abs() <= 1e-4 * fd.abs().max(dj[[r, c]].abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn size_mismatch_is_shape_error() {
        let d = DiscriminatorParams::<f64>::new(&arch(3), &mut rng_for(8, "init"));
        let a = Array2::zeros((2, 4));
        assert!(matches!(discriminate(&d, &a, &a), Err(Error::Shape(_))));
        let e = Array2::zeros((0, 3));
        assert!(matches!(discriminate(&d, &e, &Array2::zeros((1, 3))), Err(Error::Argument(_))));
    }
}
