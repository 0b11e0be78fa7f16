#![allow(dead_code)]

use std::f64::consts::PI;

use emqs_core::scenario::{builtin, parse_scenario, Problem, Scenario};
use emqs_core::{
    CsrMatrix, FitModel, Grid, GridSpec, Material, MaterialBox, MaterialField, MaterialOptions, C64,
};

pub const COPPER: f64 = 5.96e7;

pub fn omega(f: f64) -> f64 {
    2.0 * PI * f
}

pub fn scenario(name: &str) -> Scenario {
    parse_scenario(builtin(name).expect("built-in")).expect("valid built-in")
}

pub fn mixed_cube() -> Problem {
    scenario("mixed_cube").build().unwrap()
}

pub fn uniform_grid(n: [usize; 3], h: f64) -> Grid {
    Grid::new(GridSpec::uniform(n, [h; 3], [0.0; 3])).unwrap()
}

pub fn copper(lo: [f64; 3], hi: [f64; 3]) -> MaterialBox {
    MaterialBox {
        lo,
        hi,
        material: Material {
            kappa: COPPER,
            eps_r: 1.0,
            mu_r: 1.0,
            tag: "copper".into(),
        },
    }
}

pub fn model_with(grid: Grid, boxes: &[MaterialBox], options: &MaterialOptions) -> FitModel {
    let mat = MaterialField::build(&grid, &Material::vacuum(), boxes, options).unwrap();
    FitModel::new(grid, mat).unwrap()
}

pub fn vacuum_model(n: [usize; 3], h: f64) -> FitModel {
    let grid = uniform_grid(n, h);
    let mat = MaterialField::vacuum(&grid);
    FitModel::new(grid, mat).unwrap()
}

pub fn rel_diff(x: &[C64], y: &[C64]) -> f64 {
    let num: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let den: f64 = y.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Dense copy indexed `[row][col]`.
pub fn dense(m: &CsrMatrix<C64>) -> Vec<Vec<C64>> {
    let mut d = vec![vec![C64::new(0.0, 0.0); m.ncols()]; m.nrows()];
    for (r, c, v) in m.iter() {
        d[r][c] += v;
    }
    d
}
