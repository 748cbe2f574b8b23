//! Rectified Adam and the constant-then-linear learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectified Adam. Follows the cited algorithm exactly: while the
/// variance-rectification term rho_t stays <= 4 the update uses
/// bias-corrected momentum only; afterwards the adaptive step with the
/// rectification factor applies. Internal math in f64, state stored f32.
pub struct RAdam {
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdam {
    pub fn new(params: Vec<(String, Tensor)>) -> RAdam {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        RAdam {
            params,
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated on the
    /// parameters. Missing gradients are treated as zero. NaN gradients
    /// abort with a diagnostic.
    pub fn step(&mut self, lr: f32) -> Result<()> {
        for (name, t) in &self.params {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "non-finite gradient in parameter '{name}'"
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let b1t = b1.powf(t);
        let b2t = b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        let lr = lr as f64;

        for (pi, (_, tensor)) in self.params.iter().enumerate() {
            let grad = tensor.grad();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad.as_ref().map_or(0.0, |g| g[i]) as f64;
                    let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                    let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let m_hat = mi / (1.0 - b1t);
                    let delta = match rect {
                        Some(r) => {
                            let v_hat = (vi / (1.0 - b2t)).sqrt();
                            lr * r * m_hat / (v_hat + self.eps)
                        }
                        None => lr * m_hat,
                    };
                    data[i] = (data[i] as f64 - delta) as f32;
                }
            });
        }
        Ok(())
    }

    /// Serializable state: `optim.step`, `optim.m.*`, `optim.v.*`.
    pub fn state_entries(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(
            "optim.step".to_string(),
            crate::train::pack_u64(self.step),
        );
        for (pi, (name, _)) in self.params.iter().enumerate() {
            out.insert(
                format!("optim.m.{name}"),
                Tensor::from_vec(&[self.m[pi].len()], self.m[pi].clone()).unwrap(),
            );
            out.insert(
                format!("optim.v.{name}"),
                Tensor::from_vec(&[self.v[pi].len()], self.v[pi].clone()).unwrap(),
            );
        }
        out
    }

    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let step = entries
            .get("optim.step")
            .ok_or_else(|| Error::format("checkpoint missing optim.step"))?;
        self.step = crate::train::unpack_u64(step)?;
        for (pi, (name, _)) in self.params.iter().enumerate() {
            for (buf, prefix) in [(&mut self.m[pi], "m"), (&mut self.v[pi], "v")] {
                let key = format!("optim.{prefix}.{name}");
                let t = entries
                    .get(&key)
                    .ok_or_else(|| Error::format(format!("checkpoint missing {key}")))?;
                if t.numel() != buf.len() {
                    return Err(Error::format(format!("{key}: wrong element count")));
                }
                buf.copy_from_slice(&t.data());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Main,
    Finetune,
}

/// Constant learning rate for the first half of training, then linear
/// decay reaching zero at `total_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// Published main-stage schedule: 1e-4 over 200 epochs.
    pub fn main() -> LrSchedule {
        LrSchedule {
            base_lr: 1e-4,
            total_epochs: 200,
        }
    }

    /// Published fine-tuning schedule: 1e-5 over 100 epochs.
    pub fn finetune() -> LrSchedule {
        LrSchedule {
            base_lr: 1e-5,
            total_epochs: 100,
        }
    }

    pub fn custom(base_lr: f32, total_epochs: usize) -> LrSchedule {
        LrSchedule {
            base_lr,
            total_epochs,
        }
    }

    /// Learning rate at `epoch` in `0..=total`; the value at `total` is the
    /// limit 0.
    pub fn lr_at(&self, epoch: usize) -> Result<f32> {
        if epoch > self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let half = self.total_epochs / 2;
        if epoch < half {
            Ok(self.base_lr)
        } else {
            // Unit factor first: it is exactly 1.0 at the breakpoint and
            // monotone in f32, keeping lr(half) == base_lr bit-exactly.
            let span = (self.total_epochs - half) as f32;
            let factor = (self.total_epochs - epoch) as f32 / span;
            Ok(self.base_lr * factor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let p = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0])
            .unwrap()
            .requires_grad();
        let before = p.to_vec();
        let mut opt = RAdam::new(vec![("p".into(), p.clone())]);
        for _ in 0..10 {
            p.set_grad_for_test(vec![0.0; 3]);
            opt.step(0.1).unwrap();
        }
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn matches_scalar_reference() {
        // Hand-run f64 reference of the algorithm for a single scalar with
        // constant gradient 1.0, lr 0.1, beta = (0.9, 0.99).
        let p = Tensor::scalar(1.0).requires_grad();
        let mut opt = RAdam::new(vec![("w".into(), p.clone())]);

        let (b1, b2, lr, eps) = (0.9f64, 0.99f64, 0.1f64, 1e-8f64);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=8 {
            let g = 1.0f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let tf = t as f64;
            let rho_t = rho_inf - 2.0 * tf * b2.powf(tf) / (1.0 - b2.powf(tf));
            let m_hat = m / (1.0 - b1.powf(tf));
            if rho_t > 4.0 {
                let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt();
                let v_hat = (v / (1.0 - b2.powf(tf))).sqrt();
                x -= lr * r * m_hat / (v_hat + eps);
            } else {
                x -= lr * m_hat;
                assert!(t <= 4, "momentum-only branch should end after step 4");
            }

            p.set_grad_for_test(vec![1.0]);
            opt.step(0.1).unwrap();
            assert!(
                (p.item() as f64 - x).abs() < 1e-7,
                "step {t}: {} vs reference {x}",
                p.item()
            );
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize |w|^2 from w0 = 1 at lr 0.1.
        let p = Tensor::scalar(1.0).requires_grad();
        let mut opt = RAdam::new(vec![("w".into(), p.clone())]);
        for _ in 0..200 {
            let w = p.item();
            p.set_grad_for_test(vec![2.0 * w]);
            opt.step(0.1).unwrap();
        }
        assert!(p.item().abs() < 1e-3, "final w = {}", p.item());
    }

    #[test]
    fn nan_gradient_aborts() {
        let p = Tensor::scalar(1.0).requires_grad();
        let mut opt = RAdam::new(vec![("w".into(), p.clone())]);
        p.set_grad_for_test(vec![f32::NAN]);
        assert!(matches!(opt.step(0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn layout_invariance() {
        // The same 4 values as one [4] tensor or as a [2,2] tensor must
        // produce identical updates.
        let flat = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.1])
            .unwrap()
            .requires_grad();
        let square = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.1])
            .unwrap()
            .requires_grad();
        let mut o1 = RAdam::new(vec![("a".into(), flat.clone())]);
        let mut o2 = RAdam::new(vec![("a".into(), square.clone())]);
        let g = vec![0.3, -0.2, 0.7, 0.05];
        for _ in 0..7 {
            flat.set_grad_for_test(g.clone());
            square.set_grad_for_test(g.clone());
            o1.step(0.05).unwrap();
            o2.step(0.05).unwrap();
        }
        assert_eq!(flat.to_vec(), square.to_vec());
    }

    #[test]
    fn schedule_values() {
        let main = LrSchedule::main();
        assert_eq!(main.lr_at(0).unwrap(), 1e-4);
        assert_eq!(main.lr_at(99).unwrap(), 1e-4);
        assert!((main.lr_at(150).unwrap() - 5e-5).abs() < 1e-12);
        assert_eq!(main.lr_at(200).unwrap(), 0.0);
        assert!(main.lr_at(201).is_err());

        let ft = LrSchedule::finetune();
        assert_eq!(ft.lr_at(0).unwrap(), 1e-5);
        assert_eq!(ft.lr_at(100).unwrap(), 0.0);

        // Monotone non-increasing.
        let s = LrSchedule::custom(3e-4, 37);
        let mut prev = f32::INFINITY;
        for e in 0..=37 {
            let lr = s.lr_at(e).unwrap();
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        assert_eq!(prev, 0.0);
    }
}
