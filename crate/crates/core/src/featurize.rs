//! Synthetic region features standing in for detector/backbone outputs:
//! an attribute embedding (appearance), a kinematic descriptor (motion) and
//! the normalized box geometry fed to the positional projection.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::geometry::BBox;
use crate::synthdata::{Appearance, Category, Color, RegionSource, SizeClass, Texture, VideoSample};
use crate::tape::Mat;

pub const CACHE_MAGIC: &[u8; 6] = b"feat/1";
const ATTRIBUTE_DIMS: usize = 4 + 8 + 3 + 4;
const PROJECTION_SEED: u64 = 0xa77e_b0c5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub d_a: usize,
    pub d_m: usize,
    pub d_p: usize,
    pub noise_sigma: f64,
    /// Frames in the motion window, centered on the query frame.
    pub motion_window: usize,
    /// Multiplier applied to motion descriptors when assembling node inputs.
    pub motion_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { d_a: 32, d_m: 16, d_p: 8, noise_sigma: 0.2, motion_window: 5, motion_scale: 0.25 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_a < 4 || self.d_m < 4 || self.d_p < 4 {
            return Err(DstgError::Config("feature dimensions must be >= 4".into()));
        }
        if self.motion_window < 2 {
            return Err(DstgError::Config("motion_window must be >= 2".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(DstgError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn attribute_one_hot(category: Option<Category>, a: &Appearance) -> [f64; ATTRIBUTE_DIMS] {
    let mut v = [0.0; ATTRIBUTE_DIMS];
    if let Some(c) = category {
        v[Category::ALL.iter().position(|&x| x == c).unwrap()] = 1.0;
    }
    v[4 + Color::ALL.iter().position(|&x| x == a.color).unwrap()] = 1.0;
    v[12 + SizeClass::ALL.iter().position(|&x| x == a.size).unwrap()] = 1.0;
    v[15 + Texture::ALL.iter().position(|&x| x == a.texture).unwrap()] = 1.0;
    v
}

/// Fixed attribute projection (one-hot -> d_a), shared by every video.
fn attribute_projection(d_a: usize) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ d_a as u64);
    let normal = Normal::new(0.0, 0.5).unwrap();
    Mat::from_vec(ATTRIBUTE_DIMS, d_a, (0..ATTRIBUTE_DIMS * d_a).map(|_| normal.sample(&mut rng)).collect())
}

fn project(one_hot: &[f64], d_a: usize) -> Vec<f64> {
    let p = attribute_projection(d_a);
    let mut out = vec![0.0; d_a];
    for (k, &x) in one_hot.iter().enumerate() {
        if x != 0.0 {
            for (o, &w) in out.iter_mut().zip(p.row(k)) {
                *o += x * w;
            }
        }
    }
    out
}

fn add_noise(v: &mut [f64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    v.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
}

/// Appearance embedding of an object's attributes plus Gaussian noise.
pub fn make_appearance_feat(category: Category, attrs: &Appearance, cfg: &FeatureConfig, seed: u64) -> Vec<f64> {
    let mut v = project(&attribute_one_hot(Some(category), attrs), cfg.d_a);
    add_noise(&mut v, cfg.noise_sigma, seed);
    v
}

/// Clutter boxes carry color/size/texture but no category.
pub fn make_background_appearance(attrs: &Appearance, cfg: &FeatureConfig, seed: u64) -> Vec<f64> {
    let mut v = project(&attribute_one_hot(None, attrs), cfg.d_a);
    add_noise(&mut v, cfg.noise_sigma, seed);
    v
}

/// Kinematic descriptor at frame `t` over a window centered on `t`.
///
/// Layout: mean vx, mean vy, mean speed, heading of the mean velocity,
/// RMS velocity change, max speed, mean |vx|, mean |vy|, then the raw
/// per-step (vx, vy) pairs; truncated or zero-padded to `d_m`. Steps that
/// touch a missing box (video edge or occlusion) are zero.
pub fn make_motion_feat(track: &[Option<BBox>], t: usize, cfg: &FeatureConfig) -> Vec<f64> {
    let half = (cfg.motion_window / 2) as isize;
    let lo = t as isize - half;
    let steps = cfg.motion_window - 1;
    let center = |f: isize| -> Option<(f64, f64)> {
        if f < 0 {
            return None;
        }
        track.get(f as usize).copied().flatten().map(|b| b.center())
    };
    let mut vel = Vec::with_capacity(steps);
    for k in 0..steps as isize {
        let (a, b) = (center(lo + k), center(lo + k + 1));
        vel.push(match (a, b) {
            (Some(a), Some(b)) => (b.0 - a.0, b.1 - a.1),
            _ => (0.0, 0.0),
        });
    }
    let n = steps as f64;
    let mean_vx = vel.iter().map(|v| v.0).sum::<f64>() / n;
    let mean_vy = vel.iter().map(|v| v.1).sum::<f64>() / n;
    let speeds: Vec<f64> = vel.iter().map(|v| v.0.hypot(v.1)).collect();
    let mean_speed = speeds.iter().sum::<f64>() / n;
    let heading = if mean_vx == 0.0 && mean_vy == 0.0 { 0.0 } else { mean_vy.atan2(mean_vx) };
    let osc = if vel.len() > 1 {
        let e: f64 = vel.windows(2).map(|w| (w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sum();
        (e / (vel.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let max_speed = speeds.iter().cloned().fold(0.0, f64::max);
    let mean_abs_vx = vel.iter().map(|v| v.0.abs()).sum::<f64>() / n;
    let mean_abs_vy = vel.iter().map(|v| v.1.abs()).sum::<f64>() / n;
    let mut out = vec![mean_vx, mean_vy, mean_speed, heading, osc, max_speed, mean_abs_vx, mean_abs_vy];
    for v in &vel {
        out.push(v.0);
        out.push(v.1);
    }
    out.resize(cfg.d_m, 0.0);
    out
}

/// Normalized geometry `(x0/W, y0/H, x1/W, y1/H, w·h/(W·H))`.
pub fn pos_geometry(b: &BBox, width: f64, height: f64) -> [f64; 5] {
    [b.x0 / width, b.y0 / height, b.x1 / width, b.y1 / height, b.area() / (width * height)]
}

/// The linear map applied to [`pos_geometry`]; learned as part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PosProjection {
    /// 5 × d_p
    pub weight: Mat,
    /// 1 × d_p
    pub bias: Mat,
}

impl PosProjection {
    /// Copies the 5-vector into the first five outputs.
    pub fn identity(d_p: usize) -> Self {
        let mut weight = Mat::zeros(5, d_p);
        for i in 0..5.min(d_p) {
            weight.data[i * d_p + i] = 1.0;
        }
        Self { weight, bias: Mat::zeros(1, d_p) }
    }
}

pub fn make_pos_embed(b: &BBox, width: f64, height: f64, f: &PosProjection) -> Vec<f64> {
    let g = pos_geometry(b, width, height);
    let d_p = f.weight.cols;
    (0..d_p).map(|j| f.bias.data[j] + (0..5).map(|i| g[i] * f.weight.get(i, j)).sum::<f64>()).collect()
}

/// Features for every region of a video, indexed by `region_idx`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub appearance: Vec<Vec<f64>>,
    pub motion: Vec<Vec<f64>>,
    pub geometry: Vec<[f64; 5]>,
}

impl VideoFeatures {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.appearance.iter().chain(&self.motion).flatten().all(|v| v.is_finite())
            && self.geometry.iter().flatten().all(|v| v.is_finite())
    }
}

fn region_seed(video_seed: u64, region_idx: usize, stream: u64) -> u64 {
    video_seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add((region_idx as u64) << 8 | stream).rotate_left(23)
}

pub fn featurize_sample(sample: &VideoSample, cfg: &FeatureConfig) -> Result<VideoFeatures> {
    cfg.validate()?;
    let (w, h) = (sample.width as f64, sample.height as f64);
    let tracks = sample.tracks();
    let regions = sample.flat_regions();
    let n = regions.len();
    let mut out = VideoFeatures {
        appearance: Vec::with_capacity(n),
        motion: Vec::with_capacity(n),
        geometry: Vec::with_capacity(n),
    };
    for (k, r) in regions.iter().enumerate() {
        if r.region_idx != k {
            return Err(DstgError::Input(format!("region indices not dense at {k}")));
        }
        if !r.bbox.is_valid() {
            return Err(DstgError::Input(format!("degenerate box for region {k}")));
        }
        let app_seed = region_seed(sample.seed, k, 1);
        let mot_seed = region_seed(sample.seed, k, 2);
        let (app, mut mot) = match (r.source, r.object_id.and_then(|id| sample.object(id))) {
            (RegionSource::Background, _) | (_, None) => {
                let mut rng = ChaCha8Rng::seed_from_u64(region_seed(sample.seed, k, 3));
                let attrs = Appearance {
                    color: Color::ALL[rng.random_range(0..8)],
                    size: SizeClass::ALL[rng.random_range(0..3)],
                    texture: Texture::ALL[rng.random_range(0..4)],
                };
                (make_background_appearance(&attrs, cfg, app_seed), vec![0.0; cfg.d_m])
            }
            (_, Some(obj)) => (
                make_appearance_feat(obj.category, &obj.appearance, cfg, app_seed),
                make_motion_feat(&tracks[&obj.object_id], r.frame_idx, cfg),
            ),
        };
        add_noise(&mut mot, cfg.noise_sigma, mot_seed);
        out.appearance.push(app);
        out.motion.push(mot);
        out.geometry.push(pos_geometry(&r.bbox, w, h));
    }
    Ok(out)
}

/// Binary feature cache: magic, video id, counts and little-endian f64 rows.
pub fn write_feature_cache(path: &Path, video_id: &str, f: &VideoFeatures) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    let id = video_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    let n = f.len();
    let d_a = f.appearance.first().map_or(0, Vec::len);
    let d_m = f.motion.first().map_or(0, Vec::len);
    for v in [n, d_a, d_m] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..n {
        for x in f.appearance[i].iter().chain(&f.motion[i]).chain(&f.geometry[i]) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<(String, VideoFeatures)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let mut take = |k: usize| -> Result<&[u8]> {
        let s = bytes.get(cur..cur + k).ok_or_else(|| DstgError::Format("truncated feature cache".into()))?;
        cur += k;
        Ok(s)
    };
    if take(CACHE_MAGIC.len())? != CACHE_MAGIC {
        return Err(DstgError::Format("bad feature cache magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let id_len = u32_at(take(4)?);
    let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|e| DstgError::Format(e.to_string()))?;
    let n = u32_at(take(4)?);
    let d_a = u32_at(take(4)?);
    let d_m = u32_at(take(4)?);
    let mut f = VideoFeatures { appearance: Vec::new(), motion: Vec::new(), geometry: Vec::new() };
    for _ in 0..n {
        let row: Vec<f64> =
            take(8 * (d_a + d_m + 5))?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        f.appearance.push(row[..d_a].to_vec());
        f.motion.push(row[d_a..d_a + d_m].to_vec());
        f.geometry.push(row[d_a + d_m..].try_into().unwrap());
    }
    Ok((id, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_video, GeneratorConfig};

    fn attrs() -> Appearance {
        Appearance { color: Color::Red, size: SizeClass::Large, texture: Texture::Striped }
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let cfg = FeatureConfig { noise_sigma: 0.0, ..Default::default() };
        let a = make_appearance_feat(Category::Person, &attrs(), &cfg, 1);
        let b = make_appearance_feat(Category::Person, &attrs(), &cfg, 2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn color_change_moves_feature() {
        let cfg = FeatureConfig { noise_sigma: 0.0, ..Default::default() };
        let a = make_appearance_feat(Category::Person, &attrs(), &cfg, 1);
        let b = make_appearance_feat(Category::Person, &Appearance { color: Color::Blue, ..attrs() }, &cfg, 1);
        let cos = crate::tape::dot(&a, &b) / (crate::tape::dot(&a, &a).sqrt() * crate::tape::dot(&b, &b).sqrt());
        assert!(cos < 1.0 - 1e-9);
    }

    #[test]
    fn noise_within_three_sigma_of_clean() {
        let cfg = FeatureConfig { noise_sigma: 0.1, ..Default::default() };
        let clean =
            make_appearance_feat(Category::Animal, &attrs(), &FeatureConfig { noise_sigma: 0.0, ..cfg.clone() }, 0);
        let noisy = make_appearance_feat(Category::Animal, &attrs(), &cfg, 17);
        // a 3-sigma band covers > 99.7% of coordinates; allow a handful out
        let outside = clean.iter().zip(&noisy).filter(|(a, b)| (*a - *b).abs() > 0.3).count();
        assert!(outside <= 1);
    }

    #[test]
    fn monte_carlo_noise_std() {
        let cfg = FeatureConfig { noise_sigma: 0.1, ..Default::default() };
        let draws: Vec<Vec<f64>> =
            (0..1000).map(|s| make_appearance_feat(Category::Shape, &attrs(), &cfg, s)).collect();
        for j in 0..cfg.d_a {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / 1000.0;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / 999.0;
            let sd = var.sqrt();
            assert!((0.08..=0.12).contains(&sd), "coordinate {j}: {sd}");
        }
    }

    fn linear_track(v: (f64, f64), start: (f64, f64), n: usize) -> Vec<Option<BBox>> {
        (0..n)
            .map(|f| Some(BBox::from_center(start.0 + v.0 * f as f64, start.1 + v.1 * f as f64, 16.0, 16.0)))
            .collect()
    }

    #[test]
    fn motion_stationary_and_constant_velocity() {
        let cfg = FeatureConfig::default();
        let still = make_motion_feat(&linear_track((0.0, 0.0), (50.0, 50.0), 10), 5, &cfg);
        assert!(still.iter().all(|&x| x == 0.0));
        let m = make_motion_feat(&linear_track((3.0, 0.0), (50.0, 50.0), 10), 5, &cfg);
        assert_eq!(m[0], 3.0);
        assert_eq!(m[1], 0.0);
        assert_eq!(m[2], 3.0);
        assert_eq!(m[3], 0.0);
        assert_eq!(m[4], 0.0);
    }

    #[test]
    fn motion_is_translation_invariant() {
        let cfg = FeatureConfig::default();
        let a = make_motion_feat(&linear_track((1.5, -2.0), (40.0, 100.0), 12), 6, &cfg);
        let b = make_motion_feat(&linear_track((1.5, -2.0), (140.0, 60.0), 12), 6, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_zero_padded_at_edges() {
        let cfg = FeatureConfig::default();
        let m = make_motion_feat(&linear_track((2.0, 0.0), (40.0, 40.0), 10), 0, &cfg);
        // two of four steps fall before frame 0
        assert_eq!(m[0], 1.0);
        assert_eq!(&m[8..12], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pos_geometry_cases() {
        assert_eq!(pos_geometry(&BBox::new(0.0, 0.0, 256.0, 256.0), 256.0, 256.0), [0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(pos_geometry(&BBox::new(64.0, 64.0, 128.0, 128.0), 256.0, 256.0), [0.25, 0.25, 0.5, 0.5, 0.0625]);
        let e = make_pos_embed(&BBox::new(64.0, 64.0, 128.0, 128.0), 256.0, 256.0, &PosProjection::identity(8));
        assert_eq!(&e[..5], &[0.25, 0.25, 0.5, 0.5, 0.0625]);
        assert_eq!(&e[5..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sample_features_finite_and_cache_roundtrip() {
        let s = generate_video(&GeneratorConfig::default(), 4).unwrap();
        let f = featurize_sample(&s, &FeatureConfig::default()).unwrap();
        assert_eq!(f.len(), s.num_regions());
        assert!(f.all_finite());
        for g in &f.geometry {
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_feature_cache(&p, &s.video_id, &f).unwrap();
        let (id, g) = read_feature_cache(&p).unwrap();
        assert_eq!(id, s.video_id);
        assert_eq!(g, f);
    }

    proptest::proptest! {
        #[test]
        fn pos_geometry_scale_invariant(x0 in 0.0..100.0f64, y0 in 0.0..100.0f64, w in 1.0..100.0f64, h in 1.0..100.0f64, s in 0.1..10.0f64) {
            let b = BBox::new(x0, y0, x0 + w, y0 + h);
            let g = pos_geometry(&b, 256.0, 256.0);
            let bs = BBox::new(x0 * s, y0 * s, (x0 + w) * s, (y0 + h) * s);
            let gs = pos_geometry(&bs, 256.0 * s, 256.0 * s);
            for (a, b) in g.iter().zip(&gs) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
