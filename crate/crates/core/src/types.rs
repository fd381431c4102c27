//! Domain types shared by every other module.
//!
//! All coordinates are in input-pixel units: anchors, component means and
//! scales, ground truth and predictions share one frame.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Keypoint layout of a skeleton plus its OKS falloff constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    pub name: String,
    pub names: Vec<String>,
    pub kappas: Vec<f64>,
    /// Index pairs used for rendering stick figures.
    pub edges: Vec<(usize, usize)>,
    /// Fixed grouping over `K + 1` indices (the last one is the auxiliary
    /// box center), if the skeleton defines one.
    pub preset_groups: Option<Vec<Vec<usize>>>,
}

impl SkeletonSpec {
    pub fn new(
        name: impl Into<String>,
        names: Vec<String>,
        kappas: Vec<f64>,
        edges: Vec<(usize, usize)>,
        preset_groups: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let k = names.len();
        if k == 0 {
            return Err(invalid("skeleton needs at least one keypoint"));
        }
        if kappas.len() != k {
            return Err(invalid(format!("{} kappas for {} keypoints", kappas.len(), k)));
        }
        if kappas.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(invalid("kappas must be positive and finite"));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= k || b >= k) {
            return Err(invalid(format!("edge ({a}, {b}) out of range for K = {k}")));
        }
        if let Some(groups) = &preset_groups {
            GroupPartition::new(groups.clone(), k + 1)?;
        }
        Ok(Self {
            name: name.into(),
            names,
            kappas,
            edges,
            preset_groups,
        })
    }

    /// Five-keypoint stick figure used by the synthetic generator.
    ///
    /// With the auxiliary center appended it has six trainable keypoints, so
    /// group sizes 1, 2, 3 and 6 all divide evenly. The preset grouping is
    /// upper body (head and hands) and lower body (feet and center).
    pub fn synthetic() -> Self {
        let names = ["head", "left_hand", "right_hand", "left_foot", "right_foot"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Self::new(
            "synthetic",
            names,
            vec![0.1; 5],
            vec![(0, 1), (0, 2), (0, 3), (0, 4)],
            Some(vec![vec![0, 1, 2], vec![3, 4, 5]]),
        )
        .expect("built-in skeleton is valid")
    }

    /// The 17-keypoint COCO person skeleton.
    ///
    /// `kappas` are twice the COCO per-keypoint sigmas, which makes
    /// `exp(-d^2 / (2 s^2 kappa^2))` coincide with the COCO OKS term. The
    /// preset grouping is left arm, left leg, right arm, right leg,
    /// eyes and nose, ears and box center.
    pub fn coco() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let sigmas = [
            0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87,
            0.87, 0.89, 0.89,
        ];
        let kappas = sigmas.iter().map(|s| 2.0 * s / 10.0).collect();
        let edges = vec![
            (15, 13),
            (13, 11),
            (16, 14),
            (14, 12),
            (11, 12),
            (5, 11),
            (6, 12),
            (5, 6),
            (5, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (1, 2),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
        ];
        let groups = vec![
            vec![5, 7, 9],
            vec![11, 13, 15],
            vec![6, 8, 10],
            vec![12, 14, 16],
            vec![0, 1, 2],
            vec![3, 4, 17],
        ];
        Self::new("coco", names, kappas, edges, Some(groups)).expect("built-in skeleton is valid")
    }

    pub fn num_keypoints(&self) -> usize {
        self.names.len()
    }

    /// Keypoint count including the auxiliary box center.
    pub fn num_trainable(&self) -> usize {
        self.names.len() + 1
    }
}

/// One person's keypoints with binary visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet<T> {
    coords: Vec<[T; 2]>,
    visible: Vec<bool>,
}

impl<T: Real> KeypointSet<T> {
    pub fn new(coords: Vec<[T; 2]>, visible: Vec<bool>) -> Result<Self> {
        if coords.len() != visible.len() {
            return Err(invalid(format!(
                "{} coordinates but {} visibility flags",
                coords.len(),
                visible.len()
            )));
        }
        Ok(Self { coords, visible })
    }

    /// All keypoints labeled.
    pub fn all_visible(coords: Vec<[T; 2]>) -> Self {
        let visible = vec![true; coords.len()];
        Self { coords, visible }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.visible[j]
    }

    /// Coordinate of scalar dimension `d` in the flattened `2K` layout
    /// (`2j` is x of keypoint `j`, `2j + 1` its y).
    pub fn dim(&self, d: usize) -> T {
        self.coords[d / 2][d % 2]
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn push(&mut self, xy: [T; 2], visible: bool) {
        self.coords.push(xy);
        self.visible.push(visible);
    }

    /// Keeps the first `k` keypoints.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            coords: self.coords[..k.min(self.len())].to_vec(),
            visible: self.visible[..k.min(self.len())].to_vec(),
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn([T; 2]) -> [U; 2]) -> KeypointSet<U> {
        KeypointSet {
            coords: self.coords.iter().map(|&c| f(c)).collect(),
            visible: self.visible.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> KeypointSet<U> {
        self.map(|[x, y]| [x.cast(), y.cast()])
    }
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(invalid(format!(
                "box ({x_min}, {y_min}, {x_max}, {y_max}) has negative extent"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> [T; 2] {
        let half = T::lit(0.5);
        [
            (self.x_min + self.x_max) * half,
            (self.y_min + self.y_max) * half,
        ]
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Ground truth for one person.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonAnnotation<T> {
    pub keypoints: KeypointSet<T>,
    pub bbox: BBox<T>,
}

impl<T: Real> PersonAnnotation<T> {
    /// Validates the box and, when `image_side` is given, that every visible
    /// keypoint lies inside `[0, image_side]^2`.
    pub fn new(keypoints: KeypointSet<T>, bbox: BBox<T>, image_side: Option<T>) -> Result<Self> {
        BBox::new(bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max)?;
        if let Some(side) = image_side {
            for (j, (&[x, y], &v)) in keypoints.coords.iter().zip(&keypoints.visible).enumerate() {
                if v && !(x >= T::zero() && x <= side && y >= T::zero() && y <= side) {
                    return Err(invalid(format!(
                        "visible keypoint {j} at ({x}, {y}) outside the image"
                    )));
                }
            }
        }
        Ok(Self { keypoints, bbox })
    }
}

/// One pyramid level: grid of `height x width` cells at `stride` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidLevel {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl PyramidLevel {
    /// Offset scale `s = 2^(l - 5)`.
    pub fn scale(&self) -> f64 {
        2f64.powi(self.level as i32 - 5)
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidSpec {
    pub image_side: usize,
    pub levels: Vec<PyramidLevel>,
}

impl PyramidSpec {
    /// Builds a square pyramid where level `l` has stride `2^l`.
    pub fn new(image_side: usize, level_indices: &[u32]) -> Result<Self> {
        if level_indices.is_empty() {
            return Err(invalid("pyramid needs at least one level"));
        }
        let levels = level_indices
            .iter()
            .map(|&l| {
                let stride = 1usize << l;
                if l == 0 || !image_side.is_multiple_of(stride) {
                    return Err(invalid(format!(
                        "image side {image_side} is not divisible by stride {stride} (level {l})"
                    )));
                }
                let cells = image_side / stride;
                Ok(PyramidLevel {
                    level: l,
                    height: cells,
                    width: cells,
                    stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image_side, levels })
    }

    /// Total number of mixture components `M`.
    pub fn num_components(&self) -> usize {
        self.levels.iter().map(PyramidLevel::num_cells).sum()
    }

    /// Index of the first component of each level in the flat ordering.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|lv| {
                let start = acc;
                acc += lv.num_cells();
                start
            })
            .collect()
    }
}

/// Cell-center anchors for every component, level by level, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAnchors<T> {
    pub per_level: Vec<Vec<[T; 2]>>,
}

impl<T: Real> GridAnchors<T> {
    pub fn new(spec: &PyramidSpec) -> Self {
        let per_level = spec
            .levels
            .iter()
            .map(|lv| {
                let t = lv.stride as f64;
                let mut cells = Vec::with_capacity(lv.num_cells());
                for r in 0..lv.height {
                    for c in 0..lv.width {
                        cells.push([T::lit((c as f64 + 0.5) * t), T::lit((r as f64 + 0.5) * t)]);
                    }
                }
                cells
            })
            .collect();
        Self { per_level }
    }

    pub fn translated(&self, delta: [T; 2]) -> Self {
        Self {
            per_level: self
                .per_level
                .iter()
                .map(|lv| lv.iter().map(|&[x, y]| [x + delta[0], y + delta[1]]).collect())
                .collect(),
        }
    }

    /// Anchor broadcast to all `dims` scalar dimensions for each cell of a
    /// level: x for even dims, y for odd dims.
    pub fn broadcast_level(&self, level: usize, dims: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.per_level[level].len() * dims);
        for &[x, y] in &self.per_level[level] {
            for d in 0..dims {
                out.push(if d % 2 == 0 { x } else { y });
            }
        }
        out
    }
}

/// All mixture components of one image.
///
/// Component `m` owns `dims = 2K` means and scales stored row-major, a
/// foreground probability `o_m` and the derived coefficient
/// `pi_m = o_m / sum_n o_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureField<T> {
    dims: usize,
    mu: Vec<T>,
    gamma: Vec<T>,
    o: Vec<T>,
    pi: Vec<T>,
}

impl<T: Real> MixtureField<T> {
    pub fn new(dims: usize, mu: Vec<T>, gamma: Vec<T>, o: Vec<T>) -> Result<Self> {
        let m = o.len();
        if m == 0 || dims == 0 {
            return Err(invalid("mixture field needs at least one component and one dimension"));
        }
        if mu.len() != m * dims || gamma.len() != m * dims {
            return Err(invalid(format!(
                "expected {} means and scales for {m} components of {dims} dims, got {} and {}",
                m * dims,
                mu.len(),
                gamma.len()
            )));
        }
        if let Some(&g) = gamma.iter().find(|g| !(**g > T::zero()) || !g.is_finite()) {
            return Err(Error::NonPositiveScale(g.as_f64()));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite component mean"));
        }
        if o.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(invalid("foreground probabilities must lie in [0, 1]"));
        }
        let total: T = o.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::ZeroMixture);
        }
        let pi = o.iter().map(|&v| v / total).collect();
        Ok(Self {
            dims,
            mu,
            gamma,
            o,
            pi,
        })
    }

    pub fn num_components(&self) -> usize {
        self.o.len()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn num_keypoints(&self) -> usize {
        self.dims / 2
    }

    pub fn mu(&self, m: usize) -> &[T] {
        &self.mu[m * self.dims..(m + 1) * self.dims]
    }

    pub fn gamma(&self, m: usize) -> &[T] {
        &self.gamma[m * self.dims..(m + 1) * self.dims]
    }

    pub fn o(&self) -> &[T] {
        &self.o
    }

    pub fn pi(&self) -> &[T] {
        &self.pi
    }

    pub fn mu_flat(&self) -> &[T] {
        &self.mu
    }

    pub fn gamma_flat(&self) -> &[T] {
        &self.gamma
    }

    /// Reorders components; `order[i]` is the old index placed at `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut mu = Vec::with_capacity(self.mu.len());
        let mut gamma = Vec::with_capacity(self.gamma.len());
        let mut o = Vec::with_capacity(self.o.len());
        for &m in order {
            mu.extend_from_slice(self.mu(m));
            gamma.extend_from_slice(self.gamma(m));
            o.push(self.o[m]);
        }
        Self::new(self.dims, mu, gamma, o)
    }

    /// Rounds every parameter to precision `U` and renormalizes.
    pub fn cast<U: Real>(&self) -> Result<MixtureField<U>> {
        MixtureField::new(
            self.dims,
            self.mu.iter().map(|v| v.cast()).collect(),
            self.gamma.iter().map(|v| v.cast()).collect(),
            self.o.iter().map(|v| v.cast()).collect(),
        )
    }
}

/// Disjoint equal-size keypoint groups covering `0..k_total`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    k_total: usize,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, k_total: usize) -> Result<Self> {
        if groups.is_empty() || groups[0].is_empty() {
            return Err(invalid("partition needs at least one nonempty group"));
        }
        let k_g = groups[0].len();
        if groups.iter().any(|g| g.len() != k_g) {
            return Err(invalid("groups must all have the same size"));
        }
        if k_g * groups.len() != k_total {
            return Err(invalid(format!(
                "{} groups of {k_g} do not cover {k_total} keypoints",
                groups.len()
            )));
        }
        let mut seen = vec![false; k_total];
        for &j in groups.iter().flatten() {
            if j >= k_total || seen[j] {
                return Err(invalid(format!("index {j} out of range or repeated")));
            }
            seen[j] = true;
        }
        Ok(Self { groups, k_total })
    }

    /// A single group holding every index in order.
    pub fn single(k_total: usize) -> Self {
        Self {
            groups: vec![(0..k_total).collect()],
            k_total,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn k_total(&self) -> usize {
        self.k_total
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// FNV-1a over the group contents; stable across platforms and runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for g in &self.groups {
            for &j in g {
                eat(j as u64);
            }
            eat(u64::MAX);
        }
        h
    }
}

/// A synthetic ground-truth scene with its rendered grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub persons: Vec<PersonAnnotation<f64>>,
    /// Row-major `side x side` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub side: usize,
}

/// Box spanned by the minimum and maximum of all keypoint coordinates.
pub fn pseudo_bbox<T: Real>(pose: &KeypointSet<T>) -> Result<BBox<T>> {
    let mut it = pose.coords().iter();
    let &[x0, y0] = it.next().ok_or_else(|| invalid("pseudo_bbox of an empty keypoint set"))?;
    let mut b = BBox {
        x_min: x0,
        y_min: y0,
        x_max: x0,
        y_max: y0,
    };
    for &[x, y] in it {
        b.x_min = b.x_min.min(x);
        b.y_min = b.y_min.min(y);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    Ok(b)
}

/// Intersection over union; zero when the union has zero area.
pub fn box_iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(T::zero());
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > T::zero() {
        (inter / union).min(T::one()).max(T::zero())
    } else {
        T::zero()
    }
}
