//! Fused CPU kernels with analytic backward passes.
//!
//! Both kernels compute in 64-bit internally and store results in the input
//! dtype, so they serve the 32-bit training path and 64-bit gradient checks.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType, D};

use crate::error::Result;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

fn to_storage<T: WithDType>(values: Vec<f64>) -> CpuStorage {
    T::to_cpu_storage_owned(values.into_iter().map(T::from_f64).collect())
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

struct SoftmaxLast;

fn softmax_rows<T: WithDType>(x: &[T], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v.to_f64() - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = layout.shape().dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => to_storage::<f32>(softmax_rows(contiguous(v, layout, self.name())?, n)),
            CpuStorage::F64(v) => to_storage::<f64>(softmax_rows(contiguous(v, layout, self.name())?, n)),
            _ => candle_core::bail!("softmax-last: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some(res.mul(&grad_res.broadcast_sub(&dot)?)?))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// LSTM recurrence over precomputed input projections.
///
/// Inputs: projections `(B, T, 4H)` (input weights and bias already applied),
/// recurrent weights `(4H, H)` and the initial state `(B, 2H)` as `[h | c]`.
/// Output: `(B, T, 2H)` holding `[h_t | c_t]` for every step.
struct LstmRecurrence {
    hidden: usize,
}

struct Gates {
    i: f64,
    f: f64,
    g: f64,
    o: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmRecurrence {
    /// Gate activations for one batch row at one step.
    fn gates(&self, proj: &[f64], w: &[f64], h_prev: &[f64], out: &mut Vec<Gates>) {
        let h = self.hidden;
        let pre = |j: usize| proj[j] + w[j * h..(j + 1) * h].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        out.clear();
        for k in 0..h {
            out.push(Gates {
                i: sigmoid(pre(k)),
                f: sigmoid(pre(h + k)),
                g: pre(2 * h + k).tanh(),
                o: sigmoid(pre(3 * h + k)),
            });
        }
    }

    fn forward(&self, proj: &[f64], w: &[f64], init: &[f64], b: usize, t: usize) -> Vec<f64> {
        let h = self.hidden;
        let mut out = vec![0.0f64; b * t * 2 * h];
        let mut gates = Vec::with_capacity(h);
        for bi in 0..b {
            let mut state = init[bi * 2 * h..(bi + 1) * 2 * h].to_vec();
            for ti in 0..t {
                let p = &proj[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h];
                self.gates(p, w, &state[..h], &mut gates);
                let dst = &mut out[(bi * t + ti) * 2 * h..(bi * t + ti + 1) * 2 * h];
                for (k, gt) in gates.iter().enumerate() {
                    let c = gt.f * state[h + k] + gt.i * gt.g;
                    dst[h + k] = c;
                    dst[k] = gt.o * c.tanh();
                }
                state.copy_from_slice(dst);
            }
        }
        out
    }
}

impl CustomOp3 for LstmRecurrence {
    fn name(&self) -> &'static str {
        "lstm-recurrence"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, four_h) = l1.shape().dims3()?;
        let h = self.hidden;
        if four_h != 4 * h || l2.shape().dims2()? != (4 * h, h) || l3.shape().dims2()? != (b, 2 * h) {
            candle_core::bail!("lstm-recurrence: inconsistent shapes");
        }
        fn widen<T: WithDType>(s: &[T], l: &Layout) -> candle_core::Result<Vec<f64>> {
            Ok(contiguous(s, l, "lstm-recurrence")?.iter().map(|v| v.to_f64()).collect())
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(p), CpuStorage::F32(w), CpuStorage::F32(i)) => {
                to_storage::<f32>(self.forward(&widen(p, l1)?, &widen(w, l2)?, &widen(i, l3)?, b, t))
            }
            (CpuStorage::F64(p), CpuStorage::F64(w), CpuStorage::F64(i)) => {
                to_storage::<f64>(self.forward(&widen(p, l1)?, &widen(w, l2)?, &widen(i, l3)?, b, t))
            }
            _ => candle_core::bail!("lstm-recurrence: inputs must share an f32/f64 dtype"),
        };
        Ok((out, Shape::from((b, t, 2 * h))))
    }

    fn bwd(
        &self,
        proj_t: &Tensor,
        w_t: &Tensor,
        init_t: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, t, _) = proj_t.dims3()?;
        let h = self.hidden;
        let (proj, w, init, out, grad) = (host(proj_t)?, host(w_t)?, host(init_t)?, host(res)?, host(grad_res)?);
        let mut d_proj = vec![0.0f64; proj.len()];
        let mut d_w = vec![0.0f64; w.len()];
        let mut d_init = vec![0.0f64; init.len()];
        let mut gates = Vec::with_capacity(h);
        let mut dg = vec![0.0f64; 4 * h];
        for bi in 0..b {
            let mut dh_next = vec![0.0f64; h];
            let mut dc_next = vec![0.0f64; h];
            for ti in (0..t).rev() {
                let prev: &[f64] = if ti == 0 {
                    &init[bi * 2 * h..(bi + 1) * 2 * h]
                } else {
                    &out[(bi * t + ti - 1) * 2 * h..(bi * t + ti) * 2 * h]
                };
                let cur = &out[(bi * t + ti) * 2 * h..(bi * t + ti + 1) * 2 * h];
                let g_out = &grad[(bi * t + ti) * 2 * h..(bi * t + ti + 1) * 2 * h];
                let p = &proj[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h];
                self.gates(p, &w, &prev[..h], &mut gates);
                for (k, gt) in gates.iter().enumerate() {
                    let dh = g_out[k] + dh_next[k];
                    let tc = cur[h + k].tanh();
                    let dc = g_out[h + k] + dc_next[k] + dh * gt.o * (1.0 - tc * tc);
                    dg[k] = dc * gt.g * gt.i * (1.0 - gt.i);
                    dg[h + k] = dc * prev[h + k] * gt.f * (1.0 - gt.f);
                    dg[2 * h + k] = dc * gt.i * (1.0 - gt.g * gt.g);
                    dg[3 * h + k] = dh * tc * gt.o * (1.0 - gt.o);
                    dc_next[k] = dc * gt.f;
                }
                d_proj[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h].copy_from_slice(&dg);
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for (j, &dgj) in dg.iter().enumerate() {
                    let row = &w[j * h..(j + 1) * h];
                    let d_row = &mut d_w[j * h..(j + 1) * h];
                    for k in 0..h {
                        d_row[k] += dgj * prev[k];
                        dh_next[k] += dgj * row[k];
                    }
                }
            }
            d_init[bi * 2 * h..bi * 2 * h + h].copy_from_slice(&dh_next);
            d_init[bi * 2 * h + h..(bi + 1) * 2 * h].copy_from_slice(&dc_next);
        }
        let dtype = proj_t.dtype();
        let dev = proj_t.device();
        Ok((
            Some(Tensor::from_vec(d_proj, proj_t.shape(), dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(d_w, w_t.shape(), dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(d_init, init_t.shape(), dev)?.to_dtype(dtype)?),
        ))
    }
}

/// Runs the fused recurrence; see the layout notes on the kernel.
pub fn lstm_recurrence(projected: &Tensor, w_hh: &Tensor, init: &Tensor, hidden: usize) -> Result<Tensor> {
    Ok(projected
        .contiguous()?
        .apply_op3(&w_hh.contiguous()?, &init.contiguous()?, LstmRecurrence { hidden })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Lstm, LstmState, ParamStore};
    use candle_core::{Device, Var};

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn softmax_matches_composition() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 3.0, (3, 4, 7), &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 7), &Device::Cpu).unwrap();
        let fused = softmax_last(x.as_tensor()).unwrap();
        let e = x.as_tensor().exp().unwrap();
        let composed = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        assert!(max_abs_diff(&fused, &composed) < 1e-14);
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_abs_diff(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap()) < 1e-13);
    }

    #[test]
    fn lstm_kernel_matches_reference() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, 4);
        let lstm = Lstm::new(&mut store, "l", 3, 5).unwrap();
        let xs = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 6, 3), &dev).unwrap()).unwrap();
        let h0 = Var::from_tensor(&Tensor::randn(0f64, 0.5, (2, 5), &dev).unwrap()).unwrap();
        let c0 = Var::from_tensor(&Tensor::randn(0f64, 0.5, (2, 5), &dev).unwrap()).unwrap();
        let init = LstmState {
            h: h0.as_tensor().clone(),
            c: c0.as_tensor().clone(),
        };
        let fused: Vec<LstmState> = lstm.forward_states(xs.as_tensor(), Some(init.clone())).unwrap();
        let fused = Tensor::stack(
            &fused.iter().map(|s| Tensor::cat(&[&s.h, &s.c], 1).unwrap()).collect::<Vec<_>>(),
            1,
        )
        .unwrap();
        let reference = lstm.forward_reference(xs.as_tensor(), init).unwrap();
        assert!(max_abs_diff(&fused, &reference) < 1e-13);
        let w = Tensor::randn(0f64, 1.0, fused.shape(), &dev).unwrap();
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let mut vars: Vec<Tensor> = vec![xs.as_tensor().clone(), h0.as_tensor().clone(), c0.as_tensor().clone()];
        vars.extend(store.vars().iter().map(|v| v.as_tensor().clone()));
        for v in &vars {
            let d = max_abs_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
            assert!(d < 1e-12, "gradient mismatch {d}");
        }
    }
}
