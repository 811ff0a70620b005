//! Panel grids.
//!
//! An editing instance is laid out as an `(n+1) x 2` grid of equally sized
//! panels: each of the first `n` rows holds one example pair (before on the
//! left, after on the right) and the last row holds the query image next to
//! the target cell. Generation means inpainting the bottom-right panel.
//!
//! Pixels are f64 in `[0, 1]`, RGB. `compose` flattens a grid into one image,
//! `decompose` splits it back, `masked_compose` blanks the target cell and
//! returns the mask that marks it.

use crate::error::{Error, Result};
use ndarray::{s, Array2, Array3};

pub const DEFAULT_PANEL_SIZE: usize = 32;
pub const DEFAULT_BLANK_FILL: f64 = 0.5;
pub const MAX_EXAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelRole {
    Example,
    TransformedExample,
    Query,
    Target,
    Blank,
}

/// One grid cell: an `(h, w, 3)` RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub pixels: Array3<f64>,
    pub role: PanelRole,
}

impl Panel {
    pub fn new(pixels: Array3<f64>, role: PanelRole) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "panel must be (h, w, 3) with h, w > 0, got ({h}, {w}, {c})"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "panel pixels must be finite and in [0, 1], found {bad}"
            )));
        }
        Ok(Panel { pixels, role })
    }

    /// Uniformly filled panel (used for the hidden target cell).
    pub fn blank(h: usize, w: usize, fill: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fill) || !fill.is_finite() {
            return Err(Error::Validation(format!("blank fill must be in [0, 1], got {fill}")));
        }
        Panel::new(Array3::from_elem((h, w, 3), fill), PanelRole::Blank)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn with_role(mut self, role: PanelRole) -> Self {
        self.role = role;
        self
    }
}

/// Row/column extent of one panel inside the composed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

/// An `(n+1) x 2` arrangement of panels, row-major:
/// `E_1, E'_1, ..., E_n, E'_n, query, target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    panels: Vec<Panel>,
    n_examples: usize,
}

impl ImageGrid {
    /// Build from a row-major panel list. Checks the count against
    /// `n_examples` and that every panel has the same size.
    pub fn new(panels: Vec<Panel>, n_examples: usize) -> Result<Self> {
        if n_examples == 0 || n_examples > MAX_EXAMPLES {
            return Err(Error::Arity(format!(
                "number of example pairs must be in 1..={MAX_EXAMPLES}, got {n_examples}"
            )));
        }
        let want = 2 * (n_examples + 1);
        if panels.len() != want {
            return Err(Error::Arity(format!(
                "grid with {n_examples} example pair(s) needs {want} panels, got {}",
                panels.len()
            )));
        }
        let (h, w) = (panels[0].height(), panels[0].width());
        for (i, p) in panels.iter().enumerate() {
            if p.height() != h || p.width() != w {
                return Err(Error::Shape(format!(
                    "panel {i} is {}x{}, expected {h}x{w} like panel 0",
                    p.height(),
                    p.width()
                )));
            }
        }
        Ok(ImageGrid { panels, n_examples })
    }

    pub fn from_parts(
        examples: Vec<(Panel, Panel)>,
        query: Panel,
        target: Panel,
    ) -> Result<Self> {
        let n = examples.len();
        let mut panels = Vec::with_capacity(2 * (n + 1));
        for (before, after) in examples {
            panels.push(before.with_role(PanelRole::Example));
            panels.push(after.with_role(PanelRole::TransformedExample));
        }
        panels.push(query.with_role(PanelRole::Query));
        panels.push(target.with_role(PanelRole::Target));
        ImageGrid::new(panels, n)
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn panel_height(&self) -> usize {
        self.panels[0].height()
    }

    pub fn panel_width(&self) -> usize {
        self.panels[0].width()
    }

    pub fn panels(&self) -> &[Panel] {
        &self.panels
    }

    pub fn example(&self, i: usize) -> (&Panel, &Panel) {
        (&self.panels[2 * i], &self.panels[2 * i + 1])
    }

    pub fn query(&self) -> &Panel {
        &self.panels[2 * self.n_examples]
    }

    pub fn target(&self) -> &Panel {
        &self.panels[2 * self.n_examples + 1]
    }

    /// Replace the target panel (e.g. with a blank before sampling).
    pub fn with_target(mut self, target: Panel) -> Self {
        let i = 2 * self.n_examples + 1;
        self.panels[i] = target;
        self
    }

    /// Pixel extent of the target cell inside the composed image.
    pub fn target_region(&self) -> Region {
        let (h, w) = (self.panel_height(), self.panel_width());
        Region {
            row0: self.n_examples * h,
            row1: (self.n_examples + 1) * h,
            col0: w,
            col1: 2 * w,
        }
    }

    /// Flatten to one `((n+1)*h, 2*w, 3)` image.
    pub fn compose(&self) -> Array3<f64> {
        let (h, w) = (self.panel_height(), self.panel_width());
        let rows = self.n_examples + 1;
        let mut out = Array3::zeros((rows * h, 2 * w, 3));
        for (i, p) in self.panels.iter().enumerate() {
            let (r, c) = (i / 2, i % 2);
            out.slice_mut(s![r * h..(r + 1) * h, c * w..(c + 1) * w, ..])
                .assign(&p.pixels);
        }
        out
    }

    /// Split a composed image back into a grid with `n_examples` pairs.
    /// Exact inverse of [`compose`](Self::compose) for valid inputs.
    pub fn decompose(image: &Array3<f64>, n_examples: usize) -> Result<Self> {
        if n_examples == 0 || n_examples > MAX_EXAMPLES {
            return Err(Error::Arity(format!(
                "number of example pairs must be in 1..={MAX_EXAMPLES}, got {n_examples}"
            )));
        }
        let (gh, gw, c) = image.dim();
        let rows = n_examples + 1;
        if c != 3 || gh % rows != 0 || gw % 2 != 0 || gh == 0 || gw == 0 {
            return Err(Error::Shape(format!(
                "composed image ({gh}, {gw}, {c}) does not split into {rows} rows x 2 cols"
            )));
        }
        let (h, w) = (gh / rows, gw / 2);
        let mut panels = Vec::with_capacity(2 * rows);
        for i in 0..2 * rows {
            let (r, col) = (i / 2, i % 2);
            let pixels = image
                .slice(s![r * h..(r + 1) * h, col * w..(col + 1) * w, ..])
                .to_owned();
            let role = match (r == n_examples, col) {
                (false, 0) => PanelRole::Example,
                (false, _) => PanelRole::TransformedExample,
                (true, 0) => PanelRole::Query,
                (true, _) => PanelRole::Target,
            };
            panels.push(Panel::new(pixels, role)?);
        }
        ImageGrid::new(panels, n_examples)
    }

    /// Compose with the target cell replaced by `fill`. Returns the image and
    /// a `(rows*h, 2*w)` mask that is 1 exactly on the hidden cell.
    pub fn masked_compose(&self, fill: f64) -> Result<(Array3<f64>, Array2<f64>)> {
        if !(0.0..=1.0).contains(&fill) || !fill.is_finite() {
            return Err(Error::Validation(format!("blank fill must be in [0, 1], got {fill}")));
        }
        let mut image = self.compose();
        let region = self.target_region();
        image
            .slice_mut(s![region.row0..region.row1, region.col0..region.col1, ..])
            .fill(fill);
        let mut mask = Array2::zeros((image.dim().0, image.dim().1));
        mask.slice_mut(s![region.row0..region.row1, region.col0..region.col1])
            .fill(1.0);
        Ok((image, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_panel(rng: &mut impl Rng, h: usize, w: usize) -> Panel {
        let pixels = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>());
        Panel::new(pixels, PanelRole::Example).unwrap()
    }

    fn random_grid(seed: u64, n: usize, h: usize, w: usize) -> ImageGrid {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let panels = (0..2 * (n + 1)).map(|_| random_panel(&mut rng, h, w)).collect();
        ImageGrid::new(panels, n).unwrap()
    }

    #[test]
    fn compose_shape_matches_layout() {
        let g = random_grid(1, 3, 8, 10);
        assert_eq!(g.compose().dim(), (4 * 8, 2 * 10, 3));
    }

    #[test]
    fn wrong_panel_count_is_arity_error() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let panels = (0..5).map(|_| random_panel(&mut rng, 4, 4)).collect();
        match ImageGrid::new(panels, 1) {
            Err(Error::Arity(_)) => {}
            other => panic!("expected arity error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_panel_sizes_are_shape_errors() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let mut panels: Vec<Panel> = (0..4).map(|_| random_panel(&mut rng, 4, 4)).collect();
        panels[2] = random_panel(&mut rng, 4, 5);
        match ImageGrid::new(panels, 1) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let mut pixels = Array3::zeros((4, 4, 3));
        pixels[[0, 0, 0]] = 1.5;
        assert!(matches!(Panel::new(pixels, PanelRole::Query), Err(Error::Validation(_))));
    }

    #[test]
    fn masked_compose_blanks_exactly_the_target_cell() {
        let g = random_grid(4, 2, 6, 6);
        let (masked, mask) = g.masked_compose(0.5).unwrap();
        let full = g.compose();
        let region = g.target_region();
        for ((r, c, ch), v) in masked.indexed_iter() {
            let inside = r >= region.row0 && r < region.row1 && c >= region.col0 && c < region.col1;
            if inside {
                assert_eq!(*v, 0.5);
            } else {
                assert_eq!(*v, full[[r, c, ch]]);
            }
            assert_eq!(mask[[r, c]], if inside { 1.0 } else { 0.0 });
        }
        let area = mask.sum() as usize;
        assert_eq!(area, 6 * 6);
    }

    #[test]
    fn decompose_assigns_roles_positionally() {
        let g = random_grid(5, 2, 4, 4);
        let back = ImageGrid::decompose(&g.compose(), 2).unwrap();
        let roles: Vec<PanelRole> = back.panels().iter().map(|p| p.role).collect();
        assert_eq!(
            roles,
            vec![
                PanelRole::Example,
                PanelRole::TransformedExample,
                PanelRole::Example,
                PanelRole::TransformedExample,
                PanelRole::Query,
                PanelRole::Target,
            ]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn compose_decompose_round_trip(seed in 0u64..1000, n in 1usize..=MAX_EXAMPLES,
                                        h in 1usize..6, w in 1usize..6) {
            let g = random_grid(seed, n, h, w);
            let back = ImageGrid::decompose(&g.compose(), n).unwrap();
            prop_assert_eq!(back.n_examples(), n);
            for (a, b) in g.panels().iter().zip(back.panels()) {
                prop_assert_eq!(&a.pixels, &b.pixels);
            }
        }

        #[test]
        fn masked_region_area_is_one_panel(seed in 0u64..1000, n in 1usize..=4,
                                           h in 1usize..8, w in 1usize..8) {
            let g = random_grid(seed, n, h, w);
            let (_, mask) = g.masked_compose(DEFAULT_BLANK_FILL).unwrap();
            prop_assert_eq!(mask.sum() as usize, h * w);
        }
    }
}
