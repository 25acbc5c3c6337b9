//! Single-tensor growth operators.

use super::{InitRegime, Origin, Segment};
use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, NumArray, Rng};

/// `round(ratio · d)`.
pub fn expanded_len(d: usize, ratio: f64) -> Result<usize> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(Error::config(format!("growth ratio must be >= 1, got {ratio}")));
    }
    Ok((ratio * d as f64).round() as usize)
}

/// Factor that keeps the output RMS of a fan-in grown layer unchanged.
///
/// Independent new inputs or weights: `sqrt(d/d′)`. New inputs and new
/// weights both duplicated, with `c = d′/d − 1`: `1/sqrt(1+3c)` for
/// `c ≤ 1`, `1/(1+c)` beyond.
pub fn fan_in_scale_factor(both_sides_copied: bool, d_in: usize, d_in_new: usize) -> Result<f64> {
    if d_in == 0 || d_in_new < d_in {
        return Err(Error::config(format!(
            "fan-in extent cannot shrink ({d_in} -> {d_in_new})"
        )));
    }
    if d_in_new == d_in {
        return Ok(1.0);
    }
    let (d, dn) = (d_in as f64, d_in_new as f64);
    if !both_sides_copied {
        return Ok((d / dn).sqrt());
    }
    let c = dn / d - 1.0;
    Ok(if c <= 1.0 {
        1.0 / (1.0 + 3.0 * c).sqrt()
    } else {
        1.0 / (1.0 + c)
    })
}

/// Appends `new_len − d` slices along `axis` initialized per `regime`.
/// Random slices are zero-mean gaussian with the array's empirical std,
/// or match mean and std when `keep_mean` is set.
pub(crate) fn grow(
    w: &NumArray,
    axis: usize,
    new_len: usize,
    regime: InitRegime,
    rng: &mut Rng,
    keep_mean: bool,
) -> Result<(NumArray, Vec<Segment>)> {
    let shape = w.shape().to_vec();
    if axis >= shape.len() || shape.len() > 2 {
        return Err(Error::shape(format!(
            "cannot grow axis {axis} of a {}-D array",
            shape.len()
        )));
    }
    let d = shape[axis];
    if new_len < d {
        return Err(Error::config(format!("cannot shrink axis {axis} from {d} to {new_len}")));
    }
    if d == 0 {
        return Err(Error::shape("cannot grow an empty axis"));
    }
    let mut segments = vec![Segment {
        start: 0,
        end: d,
        origin: Origin::Original,
    }];
    let added = new_len - d;
    if added == 0 {
        return Ok((w.clone(), segments));
    }
    match regime {
        InitRegime::Copy => {
            let mut start = d;
            while start < new_len {
                let end = (start + d).min(new_len);
                segments.push(Segment {
                    start,
                    end,
                    origin: Origin::Copy { donor_start: 0 },
                });
                start = end;
            }
        }
        _ => segments.push(Segment {
            start: d,
            end: new_len,
            origin: Origin::for_regime(regime, 0),
        }),
    }
    // Other-axis extent (1 for vectors).
    let (rows, cols) = if shape.len() == 1 { (d, 1) } else { (shape[0], shape[1]) };
    let other = if axis == 0 { cols } else { rows };
    let block_shape = if axis == 0 { [added, other] } else { [other, added] };
    let block: Vec<f64> = match regime {
        InitRegime::Copy => Vec::new(),
        InitRegime::Zero => vec![0.0; added * other],
        InitRegime::Random => {
            let (mean, std) = w.mean_std();
            let mean = if keep_mean { mean } else { 0.0 };
            sample_gaussian(rng, &block_shape, mean, std)?.into_vec()
        }
    };
    let src = w.data();
    let mut data = Vec::with_capacity(src.len() + added * other);
    if axis == 0 {
        data.extend_from_slice(src);
        if regime == InitRegime::Copy {
            for j in d..new_len {
                let donor = j % d;
                data.extend_from_slice(&src[donor * cols..(donor + 1) * cols]);
            }
        } else {
            data.extend_from_slice(&block);
        }
    } else {
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            data.extend_from_slice(row);
            if regime == InitRegime::Copy {
                data.extend((d..new_len).map(|j| row[j % d]));
            } else {
                data.extend_from_slice(&block[r * added..(r + 1) * added]);
            }
        }
    }
    let mut new_shape = shape;
    new_shape[axis] = new_len;
    let out = NumArray::from_vec(&new_shape, data)?.to_precision(w.precision());
    Ok((out, segments))
}

/// Grows the output rows of `w (d_out × d_in)`; no rescaling.
pub fn fan_out_expand(w: &NumArray, ratio: f64, regime: InitRegime, rng: &mut Rng) -> Result<NumArray> {
    let (rows, _) = w.dims2()?;
    let n = expanded_len(rows, ratio)?;
    Ok(grow(w, 0, n, regime, rng, false)?.0)
}

/// Grows the input columns of `w (d_out × d_in)` and, when
/// `apply_scaling`, multiplies every entry by [`fan_in_scale_factor`].
/// Zero columns use the factor for independent inputs.
pub fn fan_in_expand(
    w: &NumArray,
    ratio: f64,
    regime: InitRegime,
    upstream_is_copy: bool,
    rng: &mut Rng,
    apply_scaling: bool,
) -> Result<NumArray> {
    let (_, cols) = w.dims2()?;
    let n = expanded_len(cols, ratio)?;
    let (grown, _) = grow(w, 1, n, regime, rng, false)?;
    if !apply_scaling {
        return Ok(grown);
    }
    let both = regime == InitRegime::Copy && upstream_is_copy;
    let f = fan_in_scale_factor(both, cols, n)?;
    Ok(scale_in_place(grown, f))
}

pub(crate) fn scale_in_place(mut a: NumArray, f: f64) -> NumArray {
    if f != 1.0 {
        let p = a.precision();
        a.data_mut().iter_mut().for_each(|x| *x *= f);
        a = a.to_precision(p);
    }
    a
}

/// Grows an RMSNorm gain vector; random entries match the empirical mean
/// and std of `gamma`.
pub fn rmsnorm_expand(gamma: &NumArray, ratio: f64, regime: InitRegime, rng: &mut Rng) -> Result<NumArray> {
    if gamma.ndim() != 1 {
        return Err(Error::shape("gain must be 1-D"));
    }
    if regime == InitRegime::Zero {
        return Err(Error::config(
            "zero regime is not allowed for norm gains (it would silence the new channels)",
        ));
    }
    let n = expanded_len(gamma.len(), ratio)?;
    Ok(grow(gamma, 0, n, regime, rng, true)?.0)
}
