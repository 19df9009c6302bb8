//! Central finite-difference gradient oracle.
//!
//! Test support: the oracle only ever calls forward ops, so it stays
//! independent of the backward rules it is checking.

use rand::Rng;
use rand::RngCore;

use super::{Tape, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so true-zero gradients compare by absolute
/// difference instead of dividing by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks one op: `build` wires the differentiable inputs into a graph and
/// returns the op output, the harness reduces it with a fixed random weighting
/// (a plain sum could hide sign errors that cancel), and every input element
/// is compared against a central difference.
///
/// Returns the worst relative error seen, or an error message naming the
/// offending input/element.
pub fn check_op<F>(
    build: F,
    shapes: &[Vec<usize>],
    rng: &mut dyn RngCore,
) -> Result<f64, String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    let eval = |data: &[Vec<f64>], weights: Option<&[f64]>| -> Result<(f64, Vec<Vec<f64>>), String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| tape.leaf_owned(s.clone(), d.clone()).expect("shape/data"))
            .collect();
        let out = build(&mut tape, &vars).map_err(|e| e.to_string())?;
        let w = match weights {
            Some(w) => w.to_vec(),
            None => (0..tape.value(out).len())
                .map(|i| 0.25 + ((i * 2654435761) % 97) as f64 / 97.0)
                .collect(),
        };
        let wleaf = tape
            .leaf_owned(tape.shape(out).to_vec(), w)
            .expect("weight shape");
        let prod = tape.mul(out, wleaf).map_err(|e| e.to_string())?;
        let loss = tape.sum(prod);
        tape.backward(loss).map_err(|e| e.to_string())?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((tape.value(loss)[0], grads))
    };

    let (_, analytic) = eval(&inputs, None)?;
    let mut worst = 0.0f64;
    for (pi, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        for e in 0..n {
            let mut plus = inputs.clone();
            plus[pi][e] += FD_STEP;
            let mut minus = inputs.clone();
            minus[pi][e] -= FD_STEP;
            let (fp, _) = eval(&plus, None)?;
            let (fm, _) = eval(&minus, None)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[pi].get(e).copied().unwrap_or(0.0);
            let err = rel_err(a, numeric);
            worst = worst.max(err);
            if err >= FD_TOL {
                return Err(format!(
                    "input {pi} element {e}: analytic {a:.8e} vs numeric {numeric:.8e} (rel {err:.3e})"
                ));
            }
        }
    }
    Ok(worst)
}

/// Runs `cases` random-shape gradient checks for every registered op and
/// returns (op name, worst relative error) per op.
pub fn check_all_ops(
    cases: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<(&'static str, f64)>, String> {
    let mut results = Vec::new();
    let mut record = |name: &'static str, r: Result<f64, String>| -> Result<(), String> {
        let worst = r.map_err(|e| format!("{name}: {e}"))?;
        results.push((name, worst));
        Ok(())
    };
    let dim = |rng: &mut dyn RngCore| rng.gen_range(1usize..6);

    let mut worst_of = |name: &'static str,
                        f: &mut dyn FnMut(&mut dyn RngCore) -> Result<f64, String>|
     -> Result<(), String> {
        let mut w = 0.0f64;
        for _ in 0..cases {
            w = w.max(f(rng).map_err(|e| format!("{name}: {e}"))?);
        }
        record(name, Ok(w))
    };

    worst_of("matmul", &mut |rng| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        check_op(
            |t, v| t.matmul(v[0], v[1]),
            &[vec![m, k], vec![k, n]],
            rng,
        )
    })?;
    worst_of("add", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        check_op(|t, v| t.add(v[0], v[1]), &[vec![m, n], vec![m, n]], rng)
    })?;
    worst_of("add_row", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        check_op(|t, v| t.add_row(v[0], v[1]), &[vec![m, n], vec![n]], rng)
    })?;
    worst_of("mul", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        check_op(|t, v| t.mul(v[0], v[1]), &[vec![m, n], vec![m, n]], rng)
    })?;
    worst_of("scale", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let c = rng.gen_range(-2.0..2.0);
        check_op(move |t, v| Ok(t.scale(v[0], c)), &[vec![m, n]], rng)
    })?;
    worst_of("gelu", &mut |rng| {
        let n = dim(rng) * dim(rng);
        check_op(|t, v| Ok(t.gelu(v[0])), &[vec![n]], rng)
    })?;
    worst_of("mask_fill", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let mask: std::rc::Rc<[bool]> = (0..m * n).map(|_| rng.gen_bool(0.4)).collect();
        check_op(
            move |t, v| t.mask_fill(v[0], mask.clone(), -7.0),
            &[vec![m, n]],
            rng,
        )
    })?;
    worst_of("softmax", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let axis = rng.gen_range(0usize..2);
        check_op(move |t, v| t.softmax(v[0], axis), &[vec![m, n]], rng)
    })?;
    worst_of("layer_norm", &mut |rng| {
        let (m, d) = (dim(rng), dim(rng) + 1);
        check_op(
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            &[vec![m, d], vec![d], vec![d]],
            rng,
        )
    })?;
    worst_of("cross_entropy", &mut |rng| {
        let (tn, vs) = (dim(rng), dim(rng) + 1);
        let targets: Vec<usize> = (0..tn).map(|_| rng.gen_range(0..vs)).collect();
        let mut mask: Vec<bool> = (0..tn).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        check_op(
            move |t, v| t.cross_entropy(v[0], &targets, &mask),
            &[vec![tn, vs]],
            rng,
        )
    })?;
    worst_of("gather_rows", &mut |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let ids: std::rc::Rc<[usize]> = (0..dim(rng) + 2).map(|_| rng.gen_range(0..r)).collect();
        check_op(
            move |t, v| t.gather_rows(v[0], ids.clone()),
            &[vec![r, c]],
            rng,
        )
    })?;
    worst_of("transpose", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        check_op(|t, v| t.transpose(v[0]), &[vec![m, n]], rng)
    })?;
    worst_of("slice_rows", &mut |rng| {
        let (m, n) = (dim(rng) + 1, dim(rng));
        let start = rng.gen_range(0..m);
        let len = rng.gen_range(1..=m - start);
        check_op(
            move |t, v| t.slice_rows(v[0], start, len),
            &[vec![m, n]],
            rng,
        )
    })?;
    worst_of("slice_cols", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng) + 1);
        let start = rng.gen_range(0..n);
        let len = rng.gen_range(1..=n - start);
        check_op(
            move |t, v| t.slice_cols(v[0], start, len),
            &[vec![m, n]],
            rng,
        )
    })?;
    worst_of("concat_rows", &mut |rng| {
        let n = dim(rng);
        let (m1, m2) = (dim(rng), dim(rng));
        check_op(
            |t, v| t.concat_rows(&[v[0], v[1]]),
            &[vec![m1, n], vec![m2, n]],
            rng,
        )
    })?;
    worst_of("concat_cols", &mut |rng| {
        let m = dim(rng);
        let (n1, n2) = (dim(rng), dim(rng));
        check_op(
            |t, v| t.concat_cols(&[v[0], v[1]]),
            &[vec![m, n1], vec![m, n2]],
            rng,
        )
    })?;
    worst_of("sum", &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        check_op(|t, v| Ok(t.sum(v[0])), &[vec![m, n]], rng)
    })?;

    Ok(results)
}
