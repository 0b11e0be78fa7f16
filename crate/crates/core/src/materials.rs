//! Per-cell material parameters painted from axis-aligned boxes.

use log::warn;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Vacuum permittivity in F/m.
pub const EPS0: f64 = 8.8541878128e-12;
/// Vacuum permeability in H/m.
pub const MU0: f64 = 1.25663706212e-6;
/// Speed of light in vacuum, m/s.
pub const C0: f64 = 299_792_458.0;

/// Isotropic linear material.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    /// Conductivity in S/m.
    pub kappa: f64,
    pub eps_r: f64,
    pub mu_r: f64,
    pub tag: String,
}

impl Material {
    pub fn vacuum() -> Self {
        Self {
            kappa: 0.0,
            eps_r: 1.0,
            mu_r: 1.0,
            tag: "void".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "{}: conductivity {} must be non-negative",
                self.tag, self.kappa
            )));
        }
        if !(self.mu_r > 0.0 && self.mu_r.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "{}: relative permeability {} must be positive",
                self.tag, self.mu_r
            )));
        }
        if !(self.eps_r >= 0.0 && self.eps_r.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "{}: relative permittivity {} must be non-negative",
                self.tag, self.eps_r
            )));
        }
        Ok(())
    }
}

/// A material occupying an axis-aligned box; later boxes paint over
/// earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub material: Material,
}

impl MaterialBox {
    fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }
}

/// Where the artificial conductivity κ̂ acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaHatPlacement {
    #[default]
    Everywhere,
    NonConductive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaHat {
    pub value: f64,
    pub placement: KappaHatPlacement,
}

/// Build-time options for [`MaterialField::build`].
#[derive(Debug, Clone, Default)]
pub struct MaterialOptions {
    /// κ̂ in S/m; `None` selects `1e-4 ×` the smallest nonzero conductivity.
    pub kappa_hat: Option<f64>,
    pub placement: KappaHatPlacement,
    /// Drop the permittivity inside conductors from the edge permittivity
    /// matrix.
    pub restrict_permittivity: bool,
}

/// Default ratio between κ̂ and the smallest physical conductivity.
pub const DEFAULT_KAPPA_HAT_RATIO: f64 = 1e-4;

/// Cell-wise κ, ε, ν plus region tags.
#[derive(Debug, Clone)]
pub struct MaterialField {
    kappa: Vec<f64>,
    eps: Vec<f64>,
    nu: Vec<f64>,
    tag: Vec<usize>,
    tag_names: Vec<String>,
    kappa_hat: KappaHat,
    restrict_permittivity: bool,
}

impl MaterialField {
    /// Paints `boxes` over `background` using the cell-center test.
    pub fn build(
        grid: &Grid,
        background: &Material,
        boxes: &[MaterialBox],
        options: &MaterialOptions,
    ) -> Result<Self> {
        background.validate()?;
        let (dom_lo, dom_hi) = grid.bounds();
        for b in boxes {
            b.material.validate()?;
            if (0..3).any(|a| !(b.lo[a] < b.hi[a])) {
                return Err(Error::InvalidMaterial(format!(
                    "{}: box corners must satisfy lo < hi",
                    b.material.tag
                )));
            }
            if (0..3).any(|a| b.lo[a] < dom_lo[a] || b.hi[a] > dom_hi[a]) {
                warn!(
                    "material box `{}` extends beyond the domain and is clipped",
                    b.material.tag
                );
            }
        }

        let mut tag_names = vec![background.tag.clone()];
        let mut tag_of = |name: &str| -> usize {
            match tag_names.iter().position(|t| t == name) {
                Some(i) => i,
                None => {
                    tag_names.push(name.to_string());
                    tag_names.len() - 1
                }
            }
        };
        let box_tags: Vec<usize> = boxes.iter().map(|b| tag_of(&b.material.tag)).collect();

        let nc = grid.n_cells();
        let mut kappa = vec![background.kappa; nc];
        let mut eps = vec![background.eps_r * EPS0; nc];
        let mut nu = vec![1.0 / (background.mu_r * MU0); nc];
        let mut tag = vec![0usize; nc];
        for c in 0..nc {
            let x = grid.cell_center(c);
            for (b, &t) in boxes.iter().zip(&box_tags) {
                if b.contains(x) {
                    kappa[c] = b.material.kappa;
                    eps[c] = b.material.eps_r * EPS0;
                    nu[c] = 1.0 / (b.material.mu_r * MU0);
                    tag[c] = t;
                }
            }
        }

        let min_kappa = kappa
            .iter()
            .copied()
            .filter(|&k| k > 0.0)
            .fold(f64::INFINITY, f64::min);
        let kappa_hat = match options.kappa_hat {
            Some(v) => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidMaterial(format!(
                        "kappa_hat {v} must be non-negative"
                    )));
                }
                if v > 0.0 && min_kappa.is_finite() && v >= min_kappa {
                    return Err(Error::InvalidMaterial(format!(
                        "kappa_hat {v} must stay below the smallest conductivity {min_kappa}"
                    )));
                }
                v
            }
            None if min_kappa.is_finite() => DEFAULT_KAPPA_HAT_RATIO * min_kappa,
            None => 0.0,
        };

        Ok(Self {
            kappa,
            eps,
            nu,
            tag,
            tag_names,
            kappa_hat: KappaHat {
                value: kappa_hat,
                placement: options.placement,
            },
            restrict_permittivity: options.restrict_permittivity,
        })
    }

    /// Uniform vacuum.
    pub fn vacuum(grid: &Grid) -> Self {
        Self::build(grid, &Material::vacuum(), &[], &MaterialOptions::default())
            .expect("vacuum is a valid material")
    }

    pub fn n_cells(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Permittivity as painted (F/m), independent of the restriction option.
    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn is_conductive(&self, cell: usize) -> bool {
        self.kappa[cell] > 0.0
    }

    pub fn tag(&self, cell: usize) -> &str {
        &self.tag_names[self.tag[cell]]
    }

    pub fn kappa_hat(&self) -> KappaHat {
        self.kappa_hat
    }

    pub fn with_kappa_hat(mut self, kappa_hat: KappaHat) -> Self {
        self.kappa_hat = kappa_hat;
        self
    }

    pub fn restrict_permittivity(&self) -> bool {
        self.restrict_permittivity
    }

    /// Permittivity entering the edge permittivity matrix.
    pub fn effective_eps(&self, cell: usize) -> f64 {
        if self.restrict_permittivity && self.is_conductive(cell) {
            0.0
        } else {
            self.eps[cell]
        }
    }

    /// κ̂ in `cell` for the given placement.
    pub fn kappa_hat_in(&self, cell: usize, kappa_hat: KappaHat) -> f64 {
        match kappa_hat.placement {
            KappaHatPlacement::Everywhere => kappa_hat.value,
            KappaHatPlacement::NonConductive if self.is_conductive(cell) => 0.0,
            KappaHatPlacement::NonConductive => kappa_hat.value,
        }
    }

    /// Smallest nonzero conductivity, if any cell conducts.
    pub fn min_conductivity(&self) -> Option<f64> {
        self.kappa
            .iter()
            .copied()
            .filter(|&k| k > 0.0)
            .reduce(f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn grid() -> Grid {
        Grid::new(GridSpec::uniform([4, 4, 4], [0.25; 3], [0.0; 3])).unwrap()
    }

    fn copper(lo: [f64; 3], hi: [f64; 3]) -> MaterialBox {
        MaterialBox {
            lo,
            hi,
            material: Material {
                kappa: 5.96e7,
                eps_r: 1.0,
                mu_r: 1.0,
                tag: "conductor".into(),
            },
        }
    }

    #[test]
    fn conductor_cells_are_tagged() {
        let g = grid();
        let m = MaterialField::build(
            &g,
            &Material::vacuum(),
            &[copper([0.0; 3], [0.5, 0.5, 1.0])],
            &MaterialOptions::default(),
        )
        .unwrap();
        let inside = g.cell_index([0, 1, 3]);
        let outside = g.cell_index([2, 0, 0]);
        assert!(m.is_conductive(inside));
        assert_eq!(m.tag(inside), "conductor");
        assert_eq!(m.kappa()[inside], 5.96e7);
        assert!(!m.is_conductive(outside));
        assert_eq!(m.kappa_hat().value, 1e-4 * 5.96e7);
    }

    #[test]
    fn yoke_reluctivity() {
        let g = grid();
        let yoke = MaterialBox {
            lo: [0.0; 3],
            hi: [1.0; 3],
            material: Material {
                kappa: 2e-3,
                eps_r: 1.0,
                mu_r: 4000.0,
                tag: "yoke".into(),
            },
        };
        let m = MaterialField::build(
            &g,
            &Material::vacuum(),
            &[yoke],
            &MaterialOptions::default(),
        )
        .unwrap();
        for c in 0..g.n_cells() {
            assert_eq!(m.nu()[c], 1.0 / (4000.0 * MU0));
        }
    }

    #[test]
    fn vacuum_default() {
        let g = grid();
        let m = MaterialField::vacuum(&g);
        for c in 0..g.n_cells() {
            assert!(!m.is_conductive(c));
            assert_eq!(m.kappa()[c], 0.0);
            assert_eq!(m.eps()[c], EPS0);
            assert_eq!(m.nu()[c], 1.0 / MU0);
        }
        assert_eq!(m.kappa_hat().value, 0.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let g = grid();
        let mut bad = copper([0.0; 3], [1.0; 3]);
        bad.material.kappa = -1.0;
        assert!(MaterialField::build(
            &g,
            &Material::vacuum(),
            &[bad.clone()],
            &MaterialOptions::default()
        )
        .is_err());
        bad.material.kappa = 1.0;
        bad.material.mu_r = 0.0;
        assert!(MaterialField::build(
            &g,
            &Material::vacuum(),
            &[bad.clone()],
            &MaterialOptions::default()
        )
        .is_err());
        bad.material.mu_r = 1.0;
        bad.material.eps_r = -0.5;
        assert!(
            MaterialField::build(&g, &Material::vacuum(), &[bad], &MaterialOptions::default())
                .is_err()
        );
        let opts = MaterialOptions {
            kappa_hat: Some(1e8),
            ..Default::default()
        };
        assert!(MaterialField::build(
            &g,
            &Material::vacuum(),
            &[copper([0.0; 3], [1.0; 3])],
            &opts
        )
        .is_err());
    }

    #[test]
    fn painter_order_of_disjoint_boxes_is_irrelevant() {
        let g = grid();
        let a = copper([0.0; 3], [0.5, 0.5, 0.5]);
        let mut b = copper([0.5; 3], [1.0; 3]);
        b.material.kappa = 3.0;
        b.material.tag = "other".into();
        let opts = MaterialOptions::default();
        let m1 =
            MaterialField::build(&g, &Material::vacuum(), &[a.clone(), b.clone()], &opts).unwrap();
        let m2 = MaterialField::build(&g, &Material::vacuum(), &[b, a], &opts).unwrap();
        assert_eq!(m1.kappa(), m2.kappa());
        assert_eq!(m1.eps(), m2.eps());
        assert_eq!(m1.nu(), m2.nu());
        for c in 0..g.n_cells() {
            assert_eq!(m1.tag(c), m2.tag(c));
        }
    }

    #[test]
    fn restricted_permittivity_vanishes_in_conductors() {
        let g = grid();
        let opts = MaterialOptions {
            restrict_permittivity: true,
            ..Default::default()
        };
        let m = MaterialField::build(
            &g,
            &Material::vacuum(),
            &[copper([0.0; 3], [0.5; 3])],
            &opts,
        )
        .unwrap();
        assert_eq!(m.effective_eps(g.cell_index([0, 0, 0])), 0.0);
        assert_eq!(m.effective_eps(g.cell_index([3, 3, 3])), EPS0);
    }
}
