//! Two-teacher pseudo-depth fusion and the log-depth distillation loss.
//!
//! The triplet-trained teacher is trusted on reflective pixels, the
//! photometric-only teacher everywhere else. The student regresses the fused
//! map with `|log d_hat - log d_pse|`.

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::reflection::ReflectiveMask;
use crate::tensor::Tensor;
use crate::{DEPTH_MAX, DEPTH_MIN};

#[derive(Debug, Clone)]
pub struct TeacherPair {
    pub d_tri: Tensor,
    pub d_ori: Tensor,
    pub m_r: ReflectiveMask,
}

impl TeacherPair {
    pub fn new(d_tri: Tensor, d_ori: Tensor, m_r: ReflectiveMask) -> Result<Self> {
        let shape = d_tri.shape();
        if d_ori.shape() != shape || m_r.mask.shape() != shape || shape.channels != 1 {
            return Err(Error::Shape(format!(
                "teacher depths {} and {} with mask {}",
                shape,
                d_ori.shape(),
                m_r.mask.shape()
            )));
        }
        for (name, d) in [("d_tri", &d_tri), ("d_ori", &d_ori)] {
            if let Some(v) = d.data().iter().find(|v| !(DEPTH_MIN..=DEPTH_MAX).contains(*v)) {
                return Err(Error::InvalidArgument(format!("{name} depth {v} outside [{DEPTH_MIN}, {DEPTH_MAX}]")));
            }
        }
        Ok(Self { d_tri, d_ori, m_r })
    }
}

/// `D_pse = M_r ? D_tri : D_ori`, a hard per-pixel select.
pub fn fuse_pseudo_depth(t: &TeacherPair) -> Tensor {
    let mut out = t.d_ori.clone();
    for ((o, &tri), &m) in out.data_mut().iter_mut().zip(t.d_tri.data()).zip(t.m_r.mask.data()) {
        if m != 0.0 {
            *o = tri;
        }
    }
    out
}

fn check_positive(name: &str, d: &Tensor) -> Result<()> {
    match d.data().iter().find(|&&v| !(v > 0.0)) {
        Some(v) => Err(Error::InvalidArgument(format!("{name}: depth must be positive, found {v}"))),
        None => Ok(()),
    }
}

/// Records the per-pixel `|log d_hat - log d_pse|` map.
pub fn rkd_map_node(g: &mut Graph, d_hat: NodeId, d_pse: &Tensor) -> Result<NodeId> {
    if g.shape(d_hat) != d_pse.shape() {
        return Err(Error::Shape(format!("rkd: prediction {} vs pseudo depth {}", g.shape(d_hat), d_pse.shape())));
    }
    check_positive("rkd pseudo depth", d_pse)?;
    let log_hat = g.log(d_hat)?;
    let log_pse = g.constant(d_pse.map(f64::ln));
    let diff = g.sub(log_hat, log_pse)?;
    g.abs(diff)
}

/// Loss map and its mean over all pixels.
pub fn rkd_loss(d_hat: &Tensor, d_pse: &Tensor) -> Result<(Tensor, f64)> {
    check_positive("rkd prediction", d_hat)?;
    let mut g = Graph::new();
    let hat = g.constant(d_hat.clone());
    let map = rkd_map_node(&mut g, hat, d_pse)?;
    let mean = g.mean(map)?;
    Ok((g.value(map).clone(), g.value(mean).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_depth(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.2..9.0))
    }

    fn mask(t: Tensor) -> ReflectiveMask {
        ReflectiveMask { mask: t, delta: 0.0 }
    }

    #[test]
    fn full_and_empty_masks_pick_one_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(5, 7, 1);
        let (a, b) = (random_depth(&mut rng, s), random_depth(&mut rng, s));
        let ones = TeacherPair::new(a.clone(), b.clone(), mask(Tensor::ones(s))).unwrap();
        assert_eq!(fuse_pseudo_depth(&ones), a);
        let zeros = TeacherPair::new(a, b.clone(), mask(Tensor::zeros(s))).unwrap();
        assert_eq!(fuse_pseudo_depth(&zeros), b);
    }

    #[test]
    fn checkerboard_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape::new(6, 9, 1);
        let (a, b) = (random_depth(&mut rng, s), random_depth(&mut rng, s));
        let m = Tensor::from_fn(s, |y, x, _| ((x + y) % 2) as f64);
        let fused = fuse_pseudo_depth(&TeacherPair::new(a.clone(), b.clone(), mask(m)).unwrap());
        for y in 0..6 {
            for x in 0..9 {
                let want = if (x + y) % 2 == 1 { a.get(y, x, 0) } else { b.get(y, x, 0) };
                assert_eq!(fused.get(y, x, 0), want);
            }
        }
    }

    #[test]
    fn fusion_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(4, 4, 1);
        let d = random_depth(&mut rng, s);
        let m = Tensor::from_fn(s, |y, _, _| (y % 2) as f64);
        assert_eq!(fuse_pseudo_depth(&TeacherPair::new(d.clone(), d.clone(), mask(m)).unwrap()), d);
    }

    #[test]
    fn teacher_pair_rejects_bad_inputs() {
        let s = Shape::new(2, 2, 1);
        let ok = Tensor::full(s, 1.0);
        assert!(TeacherPair::new(Tensor::full(s, 0.05), ok.clone(), mask(Tensor::zeros(s))).is_err());
        assert!(TeacherPair::new(ok.clone(), Tensor::full(Shape::new(2, 3, 1), 1.0), mask(Tensor::zeros(s))).is_err());
    }

    #[test]
    fn rkd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Shape::new(3, 5, 1);
        let d = random_depth(&mut rng, s);
        assert_eq!(rkd_loss(&d, &d).unwrap().1, 0.0);
        let (map, mean) = rkd_loss(&d.map(|v| v * std::f64::consts::E), &d).unwrap();
        assert!(map.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((mean - 1.0).abs() < 1e-12);
        let (_, mean) = rkd_loss(&d.map(|v| v / 2.0), &d).unwrap();
        assert!((mean - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rkd_is_symmetric_and_rejects_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Shape::new(4, 3, 1);
        let (a, b) = (random_depth(&mut rng, s), random_depth(&mut rng, s));
        let (ab, _) = rkd_loss(&a, &b).unwrap();
        let (ba, _) = rkd_loss(&b, &a).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-12);
        let mut bad = a.clone();
        bad.set(0, 0, 0, 0.0);
        assert!(rkd_loss(&bad, &b).is_err());
        assert!(rkd_loss(&b, &bad).is_err());
    }

    #[test]
    fn rkd_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape::new(4, 5, 1);
        let target = random_depth(&mut rng, s);
        let start = random_depth(&mut rng, s);
        let report = finite_diff_check(
            |g, p| {
                let map = rkd_map_node(g, p[0], &target)?;
                g.mean(map)
            },
            &[start],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn direct_descent_reproduces_pseudo_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(3, 3, 1);
        let target = random_depth(&mut rng, s);
        let mut d = Tensor::full(s, 1.0);
        for i in 0..3000 {
            let mut g = Graph::new();
            let p = g.parameter(d.clone());
            let map = rkd_map_node(&mut g, p, &target).unwrap();
            let loss = g.mean(map).unwrap();
            let grads = g.backward(loss).unwrap();
            let grad = &grads[&p];
            for (v, gr) in d.data_mut().iter_mut().zip(grad.data()) {
                *v = (v.ln() - 0.01 * 0.998f64.powi(i) * gr.signum()).exp();
            }
        }
        for (a, b) in d.data().iter().zip(target.data()) {
            assert!((a / b - 1.0).abs() < 0.01);
        }
    }
}
