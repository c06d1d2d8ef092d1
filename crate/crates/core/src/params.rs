//! Flat parameter and gradient vectors over all trainable state.
//!
//! Layout: every Gaussian's 14 values in [`Gaussian3D::to_array`] order,
//! followed by one block per view enhancer (`grid` cells, then `gamma_raw`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retinex::{EnhancerGrad, EnhancerParams};
use crate::scene::Gaussian3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Color,
    EnhancerGrid,
    EnhancerGamma,
}

impl ParamClass {
    pub const GAUSSIAN: [ParamClass; 5] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::Opacity,
        ParamClass::Color,
    ];

    /// Class of offset `k` within one Gaussian's 14 values.
    pub fn of_gaussian_offset(k: usize) -> ParamClass {
        match k {
            0..=2 => ParamClass::Position,
            3..=5 => ParamClass::LogScale,
            6..=9 => ParamClass::Rotation,
            10 => ParamClass::Opacity,
            11..=13 => ParamClass::Color,
            _ => panic!("gaussian parameter offset {k} out of range"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::LogScale => "log_scale",
            ParamClass::Rotation => "rotation",
            ParamClass::Opacity => "opacity",
            ParamClass::Color => "color",
            ParamClass::EnhancerGrid => "enhancer_grid",
            ParamClass::EnhancerGamma => "enhancer_gamma",
        }
    }
}

/// Where a flat index points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Gaussian { index: usize, offset: usize },
    Grid { view: usize, cell: usize },
    Gamma { view: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub num_gaussians: usize,
    /// Grid cell count per view.
    pub grid_cells: Vec<usize>,
}

impl ParamLayout {
    pub fn new(gaussians: &[Gaussian3D], enhancers: &[EnhancerParams]) -> Self {
        Self {
            num_gaussians: gaussians.len(),
            grid_cells: enhancers.iter().map(|e| e.grid.len()).collect(),
        }
    }

    pub fn gaussian_len(&self) -> usize {
        self.num_gaussians * Gaussian3D::NUM_PARAMS
    }

    pub fn len(&self) -> usize {
        self.gaussian_len() + self.grid_cells.iter().map(|c| c + 1).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First flat index of view `v`'s enhancer block.
    pub fn enhancer_offset(&self, v: usize) -> usize {
        self.gaussian_len() + self.grid_cells[..v].iter().map(|c| c + 1).sum::<usize>()
    }

    pub fn slot(&self, i: usize) -> Slot {
        if i < self.gaussian_len() {
            return Slot::Gaussian {
                index: i / Gaussian3D::NUM_PARAMS,
                offset: i % Gaussian3D::NUM_PARAMS,
            };
        }
        let mut rest = i - self.gaussian_len();
        for (view, &cells) in self.grid_cells.iter().enumerate() {
            if rest < cells {
                return Slot::Grid { view, cell: rest };
            }
            if rest == cells {
                return Slot::Gamma { view };
            }
            rest -= cells + 1;
        }
        panic!("flat index {i} out of range for layout of length {}", self.len());
    }

    pub fn index(&self, slot: Slot) -> usize {
        match slot {
            Slot::Gaussian { index, offset } => index * Gaussian3D::NUM_PARAMS + offset,
            Slot::Grid { view, cell } => self.enhancer_offset(view) + cell,
            Slot::Gamma { view } => self.enhancer_offset(view) + self.grid_cells[view],
        }
    }

    pub fn class(&self, i: usize) -> ParamClass {
        match self.slot(i) {
            Slot::Gaussian { offset, .. } => ParamClass::of_gaussian_offset(offset),
            Slot::Grid { .. } => ParamClass::EnhancerGrid,
            Slot::Gamma { .. } => ParamClass::EnhancerGamma,
        }
    }

    /// Class of every flat index, in order.
    pub fn classes(&self) -> Vec<ParamClass> {
        let mut out = Vec::with_capacity(self.len());
        for _ in 0..self.num_gaussians {
            out.extend((0..Gaussian3D::NUM_PARAMS).map(ParamClass::of_gaussian_offset));
        }
        for &cells in &self.grid_cells {
            out.extend(std::iter::repeat_n(ParamClass::EnhancerGrid, cells));
            out.push(ParamClass::EnhancerGamma);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBundle {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamBundle {
    pub fn gather(gaussians: &[Gaussian3D], enhancers: &[EnhancerParams]) -> Self {
        let layout = ParamLayout::new(gaussians, enhancers);
        let mut values = Vec::with_capacity(layout.len());
        for g in gaussians {
            values.extend_from_slice(&g.to_array());
        }
        for e in enhancers {
            values.extend_from_slice(&e.grid);
            values.push(e.gamma_raw);
        }
        Self { layout, values }
    }

    /// Writes the values back. Shapes must match the gathered layout.
    pub fn scatter(&self, gaussians: &mut [Gaussian3D], enhancers: &mut [EnhancerParams]) -> Result<()> {
        if ParamLayout::new(gaussians, enhancers) != self.layout {
            return Err(Error::InvalidConfig("parameter layout does not match scatter target".into()));
        }
        for (g, chunk) in gaussians
            .iter_mut()
            .zip(self.values[..self.layout.gaussian_len()].chunks_exact(Gaussian3D::NUM_PARAMS))
        {
            *g = Gaussian3D::from_slice(chunk);
        }
        let mut i = self.layout.gaussian_len();
        for e in enhancers {
            let n = e.grid.len();
            e.grid.copy_from_slice(&self.values[i..i + n]);
            e.gamma_raw = self.values[i + n];
            i += n + 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl GradBundle {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            layout: layout.clone(),
            values: vec![0.0; layout.len()],
        }
    }

    /// Adds a flat Gaussian gradient (as returned by the renderer) times `s`.
    pub fn add_gaussians(&mut self, grad: &[f64], s: f64) {
        assert_eq!(grad.len(), self.layout.gaussian_len(), "gaussian gradient length");
        for (a, b) in self.values.iter_mut().zip(grad) {
            *a += s * b;
        }
    }

    pub fn add_enhancer(&mut self, view: usize, grad: &EnhancerGrad, s: f64) {
        let o = self.layout.enhancer_offset(view);
        let n = self.layout.grid_cells[view];
        assert_eq!(grad.grid.len(), n, "enhancer gradient length");
        for (a, b) in self.values[o..o + n].iter_mut().zip(&grad.grid) {
            *a += s * b;
        }
        self.values[o + n] += s * grad.gamma_raw;
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFiniteGradient { index }),
            None => Ok(()),
        }
    }
}
