//! Overlapping view layouts over a latent canvas, with the Split and Merge
//! primitives that move data between the canvas and its views.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor3;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("view {view_h}x{view_w} does not fit canvas {canvas_h}x{canvas_w}")]
    ViewTooLarge {
        view_h: usize,
        view_w: usize,
        canvas_h: usize,
        canvas_w: usize,
    },
    #[error("stride must be in 1..={view}, got {stride}")]
    BadStride { stride: usize, view: usize },
    #[error("view size must be at least 1")]
    EmptyView,
    #[error("image {height}x{width} is not divisible by latent scale {scale}")]
    NotDivisible {
        height: usize,
        width: usize,
        scale: usize,
    },
    #[error("strict tiling: axis of length {dim} minus view {view} is not a multiple of stride {stride}")]
    StrideMismatch {
        dim: usize,
        view: usize,
        stride: usize,
    },
    #[error("{orientation:?} panorama expects view size {expected} (the short latent side), got {got}")]
    Orientation {
        orientation: Orientation,
        expected: usize,
        got: usize,
    },
    #[error("grid shape {got:?} does not match layout canvas {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("view {index} has shape {got:?}, layout expects {expected:?}")]
    ViewShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("tensor shape {got:?} does not match {expected:?}")]
    TensorShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("stack has {views} views but layout has {origins} origins")]
    CountMismatch { views: usize, origins: usize },
    #[error("cannot merge an empty view stack")]
    EmptyStack,
    #[error("view at {origin:?} leaves the canvas")]
    OutOfBounds { origin: (usize, usize) },
    #[error("cell ({row}, {col}) is not covered by any view")]
    Uncovered { row: usize, col: usize },
    #[error("origin {origin:?} breaks the sorted, unique origin order")]
    Unordered { origin: (usize, usize) },
    #[error("layout cannot be rescaled by {factor}: geometry not divisible")]
    Rescale { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Geometry of a panorama request, in pixels and latent cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub latent_scale: usize,
    pub latent_channels: usize,
    pub view_size: usize,
    pub stride: usize,
    /// Reject long axes that the stride does not tile exactly instead of
    /// appending an edge-flushed view.
    #[serde(default)]
    pub strict: bool,
}

impl PanoramaSpec {
    /// Builds a spec whose view side equals the short latent side, with the
    /// three-quarter overlap (`stride = L / 4`) used for the reference setup.
    pub fn for_orientation(
        image_height: usize,
        image_width: usize,
        latent_scale: usize,
        latent_channels: usize,
        orientation: Orientation,
    ) -> Self {
        let view_size = match orientation {
            Orientation::Horizontal => image_height / latent_scale.max(1),
            Orientation::Vertical => image_width / latent_scale.max(1),
        };
        Self {
            image_height,
            image_width,
            latent_scale,
            latent_channels,
            view_size,
            stride: (view_size / 4).max(1),
            strict: false,
        }
    }

    /// Latent canvas shape `(h, w)`.
    pub fn latent_shape(&self) -> (usize, usize) {
        (
            self.image_height / self.latent_scale.max(1),
            self.image_width / self.latent_scale.max(1),
        )
    }

    pub fn orientation(&self) -> Orientation {
        if self.image_height > self.image_width {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        }
    }

    pub fn validate(&self) -> Result<(), TilingError> {
        if self.view_size == 0 {
            return Err(TilingError::EmptyView);
        }
        if self.stride == 0 || self.stride > self.view_size {
            return Err(TilingError::BadStride {
                stride: self.stride,
                view: self.view_size,
            });
        }
        if self.latent_scale == 0
            || self.image_height % self.latent_scale != 0
            || self.image_width % self.latent_scale != 0
        {
            return Err(TilingError::NotDivisible {
                height: self.image_height,
                width: self.image_width,
                scale: self.latent_scale,
            });
        }
        let (h, w) = self.latent_shape();
        if self.view_size > h || self.view_size > w {
            return Err(TilingError::ViewTooLarge {
                view_h: self.view_size,
                view_w: self.view_size,
                canvas_h: h,
                canvas_w: w,
            });
        }
        Ok(())
    }
}

/// Top-left latent offsets of every view over a canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewLayout {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub view_height: usize,
    pub view_width: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
    /// Set when an edge-flushed view was appended to cover a remainder.
    pub clamped: bool,
}

impl ViewLayout {
    /// A layout whose single view is the whole canvas.
    pub fn whole(canvas_height: usize, canvas_width: usize) -> Self {
        Self {
            canvas_height,
            canvas_width,
            view_height: canvas_height,
            view_width: canvas_width,
            stride: canvas_height.max(canvas_width).max(1),
            origins: vec![(0, 0)],
            clamped: false,
        }
    }

    /// Square views of side `view` tiled over both axes.
    pub fn tile(
        canvas: (usize, usize),
        view: usize,
        stride: usize,
        strict: bool,
    ) -> Result<Self, TilingError> {
        let (h, w) = canvas;
        if view == 0 {
            return Err(TilingError::EmptyView);
        }
        if stride == 0 || stride > view {
            return Err(TilingError::BadStride { stride, view });
        }
        if view > h || view > w {
            return Err(TilingError::ViewTooLarge {
                view_h: view,
                view_w: view,
                canvas_h: h,
                canvas_w: w,
            });
        }
        let (rows, clamp_r) = axis_positions(h, view, stride, strict)?;
        let (cols, clamp_c) = axis_positions(w, view, stride, strict)?;
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self {
            canvas_height: h,
            canvas_width: w,
            view_height: view,
            view_width: view,
            stride,
            origins,
            clamped: clamp_r || clamp_c,
        })
    }

    /// Arbitrary origins, checked only for bounds. Duplicate origins are
    /// allowed here so symmetry tests can stack identical views.
    pub fn with_origins(
        canvas: (usize, usize),
        view: (usize, usize),
        origins: Vec<(usize, usize)>,
    ) -> Result<Self, TilingError> {
        let layout = Self {
            canvas_height: canvas.0,
            canvas_width: canvas.1,
            view_height: view.0,
            view_width: view.1,
            stride: view.0.max(view.1),
            origins,
            clamped: false,
        };
        for &o in &layout.origins {
            if o.0 + view.0 > canvas.0 || o.1 + view.1 > canvas.1 {
                return Err(TilingError::OutOfBounds { origin: o });
            }
        }
        Ok(layout)
    }

    pub fn num_views(&self) -> usize {
        self.origins.len()
    }

    pub fn canvas_shape(&self) -> (usize, usize) {
        (self.canvas_height, self.canvas_width)
    }

    pub fn view_shape(&self) -> (usize, usize) {
        (self.view_height, self.view_width)
    }

    /// Checks bounds, lexicographic ordering, uniqueness and full coverage.
    pub fn validate(&self) -> Result<(), TilingError> {
        for &o in &self.origins {
            if o.0 + self.view_height > self.canvas_height
                || o.1 + self.view_width > self.canvas_width
            {
                return Err(TilingError::OutOfBounds { origin: o });
            }
        }
        if let Some(pair) = self.origins.windows(2).find(|p| p[0] >= p[1]) {
            return Err(TilingError::Unordered { origin: pair[1] });
        }
        let counts = overlap_counts(self);
        if let Some(i) = counts.counts.iter().position(|&c| c == 0) {
            return Err(TilingError::Uncovered {
                row: i / self.canvas_width,
                col: i % self.canvas_width,
            });
        }
        Ok(())
    }

    /// The same layout seen at a feature map `factor` times smaller.
    pub fn downscaled(&self, factor: usize) -> Result<Self, TilingError> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let divisible = |v: usize| v % factor == 0;
        if factor == 0
            || !divisible(self.canvas_height)
            || !divisible(self.canvas_width)
            || !divisible(self.view_height)
            || !divisible(self.view_width)
            || !self.origins.iter().all(|&(r, c)| divisible(r) && divisible(c))
        {
            return Err(TilingError::Rescale { factor });
        }
        Ok(Self {
            canvas_height: self.canvas_height / factor,
            canvas_width: self.canvas_width / factor,
            view_height: self.view_height / factor,
            view_width: self.view_width / factor,
            stride: (self.stride / factor).max(1),
            origins: self
                .origins
                .iter()
                .map(|&(r, c)| (r / factor, c / factor))
                .collect(),
            clamped: self.clamped,
        })
    }
}

fn axis_positions(
    dim: usize,
    view: usize,
    stride: usize,
    strict: bool,
) -> Result<(Vec<usize>, bool), TilingError> {
    let span = dim - view;
    if span % stride != 0 && strict {
        return Err(TilingError::StrideMismatch { dim, view, stride });
    }
    let mut positions: Vec<usize> = (0..=span / stride).map(|i| i * stride).collect();
    let clamped = span % stride != 0;
    if clamped {
        positions.push(span);
    }
    Ok((positions, clamped))
}

/// Computes the view layout for a panorama request.
pub fn plan_views(spec: &PanoramaSpec, orientation: Orientation) -> Result<ViewLayout, TilingError> {
    spec.validate()?;
    let (h, w) = spec.latent_shape();
    let short = h.min(w);
    let expected = match orientation {
        Orientation::Horizontal => h,
        Orientation::Vertical => w,
    };
    // A view narrower than the short side means two-axis tiling, which is
    // allowed; a panorama whose "short" side is the tiled one is not.
    if expected != short {
        return Err(TilingError::Orientation {
            orientation,
            expected: short,
            got: spec.view_size,
        });
    }
    ViewLayout::tile((h, w), spec.view_size, spec.stride, spec.strict)
}

/// Whether a grid holds the sampled latent or an intermediate block feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRole {
    Latent,
    BlockFeature,
}

/// The full canvas: a latent `x_t` or a block feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<S> {
    pub data: Tensor3<S>,
    pub role: GridRole,
}

impl<S: Scalar> LatentGrid<S> {
    pub fn latent(data: Tensor3<S>) -> Self {
        Self {
            data,
            role: GridRole::Latent,
        }
    }

    pub fn feature(data: Tensor3<S>) -> Self {
        Self {
            data,
            role: GridRole::BlockFeature,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.shape()
    }
}

/// Views cut from one canvas, in layout origin order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStack<S> {
    pub views: Vec<Tensor3<S>>,
    pub layout: ViewLayout,
}

impl<S: Scalar> ViewStack<S> {
    pub fn new(views: Vec<Tensor3<S>>, layout: ViewLayout) -> Result<Self, TilingError> {
        if views.len() != layout.num_views() {
            return Err(TilingError::CountMismatch {
                views: views.len(),
                origins: layout.num_views(),
            });
        }
        let expected = layout.view_shape();
        for (index, v) in views.iter().enumerate() {
            if (v.height, v.width) != expected {
                return Err(TilingError::ViewShape {
                    index,
                    expected,
                    got: (v.height, v.width),
                });
            }
        }
        if let Some(first) = views.first() {
            if views.iter().any(|v| v.channels != first.channels) {
                return Err(TilingError::ViewShape {
                    index: 0,
                    expected,
                    got: (first.height, first.width),
                });
            }
        }
        Ok(Self { views, layout })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.views.first().map_or(0, |v| v.channels)
    }
}

/// Copies every view out of the grid.
pub fn split<S: Scalar>(grid: &LatentGrid<S>, layout: &ViewLayout) -> Result<ViewStack<S>, TilingError> {
    split_tensor(&grid.data, layout)
}

pub fn split_tensor<S: Scalar>(grid: &Tensor3<S>, layout: &ViewLayout) -> Result<ViewStack<S>, TilingError> {
    if (grid.height, grid.width) != layout.canvas_shape() {
        return Err(TilingError::ShapeMismatch {
            expected: layout.canvas_shape(),
            got: (grid.height, grid.width),
        });
    }
    let views = layout
        .origins
        .iter()
        .map(|&(r, c)| grid.crop(r, c, layout.view_height, layout.view_width))
        .collect();
    Ok(ViewStack {
        views,
        layout: layout.clone(),
    })
}

/// Averages overlapping views back into one canvas.
///
/// Contributions are summed in origin order and divided by the per-cell
/// view count, so the result does not depend on how the views were computed.
pub fn merge<S: Scalar>(stack: &ViewStack<S>) -> Result<LatentGrid<S>, TilingError> {
    merge_tensor(stack).map(LatentGrid::feature)
}

pub fn merge_tensor<S: Scalar>(stack: &ViewStack<S>) -> Result<Tensor3<S>, TilingError> {
    if stack.views.is_empty() {
        return Err(TilingError::EmptyStack);
    }
    if stack.views.len() != stack.layout.num_views() {
        return Err(TilingError::CountMismatch {
            views: stack.views.len(),
            origins: stack.layout.num_views(),
        });
    }
    let layout = &stack.layout;
    let channels = stack.channels();
    let mut sum = Tensor3::zeros(layout.canvas_height, layout.canvas_width, channels);
    for (index, (view, &(r, c))) in stack.views.iter().zip(&layout.origins).enumerate() {
        if (view.height, view.width) != layout.view_shape() || view.channels != channels {
            return Err(TilingError::ViewShape {
                index,
                expected: layout.view_shape(),
                got: (view.height, view.width),
            });
        }
        sum.add_window(r, c, view);
    }
    let counts = overlap_counts(layout);
    for (cell, &count) in counts.counts.iter().enumerate() {
        if count == 0 {
            return Err(TilingError::Uncovered {
                row: cell / layout.canvas_width,
                col: cell % layout.canvas_width,
            });
        }
        if count > 1 {
            let n = S::of_usize(count as usize);
            for v in &mut sum.data[cell * channels..(cell + 1) * channels] {
                *v /= n;
            }
        }
    }
    Ok(sum)
}

/// Number of views covering each canvas cell, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountGrid {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl CountGrid {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.width + col]
    }

    pub fn min(&self) -> u32 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

pub fn overlap_counts(layout: &ViewLayout) -> CountGrid {
    let (h, w) = layout.canvas_shape();
    let mut counts = vec![0u32; h * w];
    for &(r, c) in &layout.origins {
        for y in r..(r + layout.view_height).min(h) {
            for x in c..(c + layout.view_width).min(w) {
                counts[y * w + x] += 1;
            }
        }
    }
    CountGrid {
        height: h,
        width: w,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Tensor3<f64> {
        Tensor3::from_vec(1, values.len(), 1, values.to_vec())
    }

    fn line_layout(len: usize, view: usize, stride: usize) -> ViewLayout {
        // 1 x len canvas with 1 x view windows.
        let origins = (0..=(len - view) / stride).map(|i| (0, i * stride)).collect();
        ViewLayout::with_origins((1, len), (1, view), origins).unwrap()
    }

    fn enumerate_origins(dim: usize, view: usize, stride: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut p = 0;
        while p + view <= dim {
            out.push(p);
            p += stride;
        }
        out
    }

    #[test]
    fn full_scale_horizontal_config_has_21_views() {
        let spec = PanoramaSpec::for_orientation(512, 3072, 8, 4, Orientation::Horizontal);
        assert_eq!((spec.view_size, spec.stride), (64, 16));
        let layout = plan_views(&spec, Orientation::Horizontal).unwrap();
        let cols = enumerate_origins(384, 64, 16);
        assert_eq!(cols.len(), 21);
        assert_eq!(layout.num_views(), 21);
        assert_eq!(
            layout.origins,
            cols.iter().map(|&c| (0, c)).collect::<Vec<_>>()
        );
        assert_eq!(*cols.last().unwrap(), 320);
    }

    #[test]
    fn vertical_config_tiles_rows() {
        let spec = PanoramaSpec::for_orientation(3072, 512, 8, 4, Orientation::Vertical);
        let layout = plan_views(&spec, Orientation::Vertical).unwrap();
        let rows = enumerate_origins(384, 64, 16);
        assert_eq!(
            layout.origins,
            rows.iter().map(|&r| (r, 0)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn square_canvas_is_one_view() {
        for stride in [1, 7, 16, 64] {
            let spec = PanoramaSpec {
                image_height: 512,
                image_width: 512,
                latent_scale: 8,
                latent_channels: 4,
                view_size: 64,
                stride,
                strict: true,
            };
            let layout = plan_views(&spec, Orientation::Horizontal).unwrap();
            assert_eq!(layout.origins, vec![(0, 0)]);
        }
    }

    #[test]
    fn plan_rejects_bad_geometry() {
        let mut spec = PanoramaSpec::for_orientation(512, 3072, 8, 4, Orientation::Horizontal);
        spec.stride = 0;
        assert!(matches!(
            plan_views(&spec, Orientation::Horizontal),
            Err(TilingError::BadStride { .. })
        ));
        spec.stride = 16;
        spec.view_size = 65;
        assert!(matches!(
            plan_views(&spec, Orientation::Horizontal),
            Err(TilingError::ViewTooLarge { .. })
        ));
        spec.view_size = 64;
        assert!(matches!(
            plan_views(&spec, Orientation::Vertical),
            Err(TilingError::Orientation { .. })
        ));
    }

    #[test]
    fn clamp_mode_appends_edge_view_and_strict_rejects() {
        let mut spec = PanoramaSpec {
            image_height: 64,
            image_width: 100,
            latent_scale: 1,
            latent_channels: 4,
            view_size: 64,
            stride: 16,
            strict: false,
        };
        let layout = plan_views(&spec, Orientation::Horizontal).unwrap();
        assert!(layout.clamped);
        assert_eq!(layout.origins, vec![(0, 0), (0, 16), (0, 32), (0, 36)]);
        assert_eq!(overlap_counts(&layout).min(), 1);
        spec.strict = true;
        assert!(matches!(
            plan_views(&spec, Orientation::Horizontal),
            Err(TilingError::StrideMismatch { .. })
        ));
    }

    #[test]
    fn split_hand_example() {
        let grid = LatentGrid::latent(row(&[0., 1., 2., 3., 4.]));
        let stack = split(&grid, &line_layout(5, 3, 2)).unwrap();
        assert_eq!(stack.views, vec![row(&[0., 1., 2.]), row(&[2., 3., 4.])]);
    }

    #[test]
    fn split_copies_instead_of_aliasing() {
        let grid = LatentGrid::latent(row(&[0., 1., 2., 3., 4.]));
        let mut stack = split(&grid, &line_layout(5, 3, 2)).unwrap();
        stack.views[0].data[2] = 100.0;
        assert_eq!(grid.data.data[2], 2.0);
        assert_eq!(stack.views[1].data[0], 2.0);
    }

    #[test]
    fn single_view_split_is_the_grid() {
        let t = Tensor3::<f32>::from_fn(4, 4, 3, |y, x, c| (y * 7 + x * 3 + c) as f32);
        let layout = ViewLayout::tile((4, 4), 4, 2, true).unwrap();
        let stack = split_tensor(&t, &layout).unwrap();
        assert_eq!(stack.views, vec![t.clone()]);
        assert_eq!(merge_tensor(&stack).unwrap(), t);
    }

    #[test]
    fn merge_hand_example() {
        let layout = line_layout(5, 3, 2);
        let stack = ViewStack::new(vec![row(&[1., 1., 1.]), row(&[3., 3., 3.])], layout).unwrap();
        assert_eq!(merge_tensor(&stack).unwrap(), row(&[1., 1., 2., 3., 3.]));
    }

    #[test]
    fn merge_constant_views_is_constant() {
        let layout = ViewLayout::tile((8, 20), 8, 3, false).unwrap();
        let views = vec![Tensor3::<f32>::filled(8, 8, 2, 0.7); layout.num_views()];
        let merged = merge_tensor(&ViewStack::new(views, layout).unwrap()).unwrap();
        assert!(merged.data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn merge_rejects_empty_stack() {
        let layout = ViewLayout::with_origins((1, 5), (1, 3), vec![]).unwrap();
        let stack = ViewStack::<f64> {
            views: vec![],
            layout,
        };
        assert_eq!(merge_tensor(&stack), Err(TilingError::EmptyStack));
    }

    #[test]
    fn split_rejects_shape_mismatch() {
        let grid = LatentGrid::latent(Tensor3::<f64>::zeros(4, 6, 1));
        let layout = ViewLayout::tile((4, 8), 4, 2, true).unwrap();
        assert!(matches!(
            split(&grid, &layout),
            Err(TilingError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn overlap_count_examples() {
        assert_eq!(overlap_counts(&line_layout(5, 3, 2)).counts, vec![1, 1, 2, 1, 1]);
        let single = ViewLayout::tile((6, 6), 6, 3, true).unwrap();
        assert!(overlap_counts(&single).counts.iter().all(|&c| c == 1));
        let disjoint = ViewLayout::tile((4, 16), 4, 4, true).unwrap();
        assert!(overlap_counts(&disjoint).counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn two_axis_tiling_covers_canvas() {
        let layout = ViewLayout::tile((12, 16), 8, 4, true).unwrap();
        assert_eq!(layout.num_views(), 2 * 3);
        layout.validate().unwrap();
        let counts = overlap_counts(&layout);
        assert_eq!(counts.get(0, 0), 1);
        assert_eq!(counts.get(5, 5), 4);
        assert_eq!(counts.total(), 6 * 64);
        let t = Tensor3::<f64>::from_fn(12, 16, 2, |y, x, c| (y * 31 + x * 7 + c) as f64 * 0.1);
        let back = merge_tensor(&split_tensor(&t, &layout).unwrap()).unwrap();
        assert!(back.max_abs_diff(&t) <= 1e-12);
    }

    #[test]
    fn view_count_law_matches_enumeration() {
        for dim in 1..=64 {
            for view in 1..=dim {
                for stride in 1..=view {
                    let closed = (dim - view) / stride + 1;
                    let brute = enumerate_origins(dim, view, stride);
                    let strict = ViewLayout::tile((view, dim), view, stride, true);
                    if (dim - view) % stride == 0 {
                        assert_eq!(brute.len(), closed);
                        assert_eq!(strict.unwrap().num_views(), closed);
                    } else {
                        assert!(strict.is_err());
                        let clamped = ViewLayout::tile((view, dim), view, stride, false).unwrap();
                        assert_eq!(clamped.num_views(), brute.len() + 1);
                        assert_eq!(overlap_counts(&clamped).min(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn downscaled_layout_halves_geometry() {
        let layout = ViewLayout::tile((16, 64), 16, 4, true).unwrap();
        let half = layout.downscaled(2).unwrap();
        assert_eq!(half.canvas_shape(), (8, 32));
        assert_eq!(half.view_shape(), (8, 8));
        assert_eq!(half.origins[1], (0, 2));
        let odd = ViewLayout::tile((16, 66), 16, 5, false).unwrap();
        assert!(odd.downscaled(2).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_coverage(
            h in 1usize..12, w in 1usize..40, view in 1usize..12,
            stride_frac in 0.0f64..1.0, seed in 0u64..1000,
        ) {
            let view = view.min(h).min(w);
            let stride = 1 + ((view - 1) as f64 * stride_frac) as usize;
            let layout = ViewLayout::tile((h, w), view, stride, false).unwrap();
            layout.validate().unwrap();
            let counts = overlap_counts(&layout);
            prop_assert!(counts.min() >= 1);
            prop_assert_eq!(counts.total(), (layout.num_views() * view * view) as u64);
            let t = Tensor3::<f32>::from_fn(h, w, 2, |y, x, c| {
                ((y * 131 + x * 17 + c * 7) as f32 + seed as f32).sin() * 3.0
            });
            let back = merge_tensor(&split_tensor(&t, &layout).unwrap()).unwrap();
            for (a, b) in back.data.iter().zip(&t.data) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
            }
        }

        #[test]
        fn merge_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
            let layout = ViewLayout::tile((4, 14), 4, 3, false).unwrap();
            let mk = |k: f64| -> Vec<Tensor3<f64>> {
                (0..layout.num_views())
                    .map(|i| Tensor3::from_fn(4, 4, 1, |y, x, _| ((i * 13 + y * 5 + x) as f64 + k + seed as f64).cos()))
                    .collect()
            };
            let s1 = mk(0.3);
            let s2 = mk(1.7);
            let combo: Vec<_> = s1.iter().zip(&s2).map(|(p, q)| p.zip_map(q, |u, v| a * u + b * v)).collect();
            let lhs = merge_tensor(&ViewStack::new(combo, layout.clone()).unwrap()).unwrap();
            let m1 = merge_tensor(&ViewStack::new(s1, layout.clone()).unwrap()).unwrap();
            let m2 = merge_tensor(&ViewStack::new(s2, layout).unwrap()).unwrap();
            let rhs = m1.zip_map(&m2, |u, v| a * u + b * v);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
