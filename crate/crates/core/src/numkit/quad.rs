use crate::error::{Error, Result};

fn check_grid(values: &[f64], grid: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::input(format!(
            "trapezoid: {} values on a grid of {} nodes",
            values.len(),
            grid.len()
        )));
    }
    if grid.len() < 2 {
        return Err(Error::input("trapezoid: need at least two nodes"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("trapezoid: grid must be strictly increasing"));
    }
    Ok(())
}

/// Composite trapezoidal rule `Σ (t_{k+1} − t_k)(v_k + v_{k+1})/2`.
pub fn trapezoid_integrate(values: &[f64], grid: &[f64]) -> Result<f64> {
    check_grid(values, grid)?;
    Ok(values
        .windows(2)
        .zip(grid.windows(2))
        .map(|(v, t)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum())
}

/// Running trapezoidal integral; entry `k` integrates over `[grid[0], grid[k]]`.
pub fn cumulative_trapezoid(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(values, grid)?;
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(acc);
    for (v, t) in values.windows(2).zip(grid.windows(2)) {
        acc += 0.5 * (t[1] - t[0]) * (v[0] + v[1]);
        out.push(acc);
    }
    Ok(out)
}
