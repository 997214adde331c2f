//! Tile-binned splat rasterizer with front-to-back alpha compositing and its
//! analytic backward pass.

use rayon::prelude::*;

use crate::deform::PosedGaussians;
use crate::error::{Error, Result};
use crate::geometry::{self, Camera};
use crate::linalg::*;

/// Compositing constants shared by the tiled and the reference rasterizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Upper clip on per-fragment alpha.
    pub alpha_max: f64,
    /// Fragments below this alpha at a pixel are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_min: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            tile_size: 16,
        }
    }
}

/// One projected primitive ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFragment {
    pub gaussian_index: usize,
    pub pixel_mean: Vec2,
    /// Inverse of the screen-space covariance.
    pub sigma2d_inv: Mat2,
    /// Screen-space covariance, used for the footprint.
    pub sigma2d: Mat2,
    pub depth: f64,
    pub color: Vec3,
    pub base_opacity: f64,
}

impl SplatFragment {
    /// Half extents (x, y) of the region where this fragment can reach
    /// `alpha_min`, or `None` if it never does.
    pub fn footprint(&self, settings: &RenderSettings) -> Option<Vec2> {
        if self.base_opacity < settings.alpha_min {
            return None;
        }
        // alpha = o·G ≥ alpha_min  ⇔  dᵀΣ⁻¹d ≤ 2 ln(o / alpha_min)
        let k2 = 2.0 * (self.base_opacity / settings.alpha_min).ln();
        // slack absorbs rounding between the covariance and its inverse
        let slack = 1.0 + 1e-9;
        Some([
            (k2 * self.sigma2d[0][0]).sqrt() * slack + 1e-6,
            (k2 * self.sigma2d[1][1]).sqrt() * slack + 1e-6,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// Row-major H×W×3.
    pub rgb: Vec<f64>,
    /// Row-major H×W.
    pub accumulated_alpha: Vec<f64>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, color: Vec3) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        ImageBuffer {
            width,
            height,
            rgb,
            accumulated_alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Per-tile fragment lists, each sorted by depth then gaussian index.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    /// Indices into the fragment slice, one list per tile, row-major.
    pub lists: Vec<Vec<u32>>,
}

fn depth_order(fragments: &[SplatFragment]) -> impl Fn(&u32, &u32) -> std::cmp::Ordering + '_ {
    move |&a, &b| {
        let (fa, fb) = (&fragments[a as usize], &fragments[b as usize]);
        fa.depth
            .total_cmp(&fb.depth)
            .then(fa.gaussian_index.cmp(&fb.gaussian_index))
    }
}

pub fn bin_tiles(fragments: &[SplatFragment], width: usize, height: usize, settings: &RenderSettings) -> TileBins {
    let ts = settings.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (fi, f) in fragments.iter().enumerate() {
        let Some(ext) = f.footprint(settings) else { continue };
        // pixel centers sit at integer coordinates
        let x0 = (f.pixel_mean[0] - ext[0]).ceil().max(0.0);
        let x1 = (f.pixel_mean[0] + ext[0]).floor().min(width as f64 - 1.0);
        let y0 = (f.pixel_mean[1] - ext[1]).ceil().max(0.0);
        let y1 = (f.pixel_mean[1] + ext[1]).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(fi as u32);
            }
        }
    }
    let order = depth_order(fragments);
    for list in &mut lists {
        list.sort_by(&order);
    }
    TileBins {
        tiles_x,
        tiles_y,
        tile_size: ts,
        lists,
    }
}

#[inline]
fn fragment_alpha(f: &SplatFragment, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64)> {
    let d = [px - f.pixel_mean[0], py - f.pixel_mean[1]];
    let g = geometry::eval_density(d, &f.sigma2d_inv);
    let alpha = (f.base_opacity * g).min(settings.alpha_max);
    (alpha >= settings.alpha_min).then_some((alpha, g))
}

/// Composites `order` at one pixel. Returns (rgb, transmittance).
#[inline]
fn composite_pixel(
    fragments: &[SplatFragment],
    order: &[u32],
    px: f64,
    py: f64,
    background: Vec3,
    settings: &RenderSettings,
) -> (Vec3, f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for &fi in order {
        let f = &fragments[fi as usize];
        let Some((alpha, _)) = fragment_alpha(f, px, py, settings) else {
            continue;
        };
        let w = alpha * t;
        for k in 0..3 {
            c[k] += f.color[k] * w;
        }
        t *= 1.0 - alpha;
        if t < settings.transmittance_min {
            break;
        }
    }
    for k in 0..3 {
        c[k] += t * background[k];
    }
    (c, t)
}

/// Per pixel, the fragments that were blended (high bit set where alpha was
/// clamped), each pixel terminated by `u32::MAX`. Two renders with equal
/// structure lie on the same smooth piece of the image function.
pub fn blend_structure(state: &RenderState) -> Vec<u32> {
    let (w, h) = (state.camera.width, state.camera.height);
    let bins = &state.bins;
    let s = &state.settings;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let tile = (y / bins.tile_size) * bins.tiles_x + x / bins.tile_size;
            let mut t = 1.0;
            for &fi in &bins.lists[tile] {
                let f = &state.fragments[fi as usize];
                let Some((alpha, _)) = fragment_alpha(f, x as f64, y as f64, s) else {
                    continue;
                };
                let clamped = f.base_opacity
                    * geometry::eval_density([x as f64 - f.pixel_mean[0], y as f64 - f.pixel_mean[1]], &f.sigma2d_inv)
                    > s.alpha_max;
                out.push(fi | if clamped { 1 << 31 } else { 0 });
                t *= 1.0 - alpha;
                if t < s.transmittance_min {
                    break;
                }
            }
            out.push(u32::MAX);
        }
    }
    out
}

fn tile_pixels(bins: &TileBins, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = bins.tile_size;
    let (tx, ty) = (tile % bins.tiles_x, tile / bins.tiles_x);
    let xs = tx * ts..((tx + 1) * ts).min(width);
    let ys = ty * ts..((ty + 1) * ts).min(height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Tiled forward rasterization of already-projected fragments.
pub fn rasterize(
    fragments: &[SplatFragment],
    width: usize,
    height: usize,
    background: Vec3,
    settings: &RenderSettings,
) -> (ImageBuffer, TileBins) {
    let bins = bin_tiles(fragments, width, height, settings);
    let tiles: Vec<Vec<(usize, Vec3, f64)>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            tile_pixels(&bins, tile, width, height)
                .map(|(x, y)| {
                    let (c, t) = composite_pixel(fragments, list, x as f64, y as f64, background, settings);
                    (y * width + x, c, t)
                })
                .collect()
        })
        .collect();
    let mut image = ImageBuffer::filled(width, height, background);
    for (p, c, t) in tiles.into_iter().flatten() {
        image.rgb[p * 3..p * 3 + 3].copy_from_slice(&c);
        image.accumulated_alpha[p] = 1.0 - t;
    }
    (image, bins)
}

/// Untiled reference: every pixel visits every fragment in global depth order.
pub fn rasterize_reference(
    fragments: &[SplatFragment],
    width: usize,
    height: usize,
    background: Vec3,
    settings: &RenderSettings,
) -> ImageBuffer {
    let mut order: Vec<u32> = (0..fragments.len() as u32).collect();
    order.sort_by(depth_order(fragments));
    let mut image = ImageBuffer::filled(width, height, background);
    for y in 0..height {
        for x in 0..width {
            let (c, t) = composite_pixel(fragments, &order, x as f64, y as f64, background, settings);
            let p = y * width + x;
            image.rgb[p * 3..p * 3 + 3].copy_from_slice(&c);
            image.accumulated_alpha[p] = 1.0 - t;
        }
    }
    image
}

/// Gradient with respect to one fragment's compositing inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FragmentGrad {
    pub pixel_mean: Vec2,
    pub sigma2d_inv: Mat2,
    pub base_opacity: f64,
    pub color: Vec3,
}

impl FragmentGrad {
    fn add(&mut self, o: &FragmentGrad) {
        for k in 0..2 {
            self.pixel_mean[k] += o.pixel_mean[k];
            for l in 0..2 {
                self.sigma2d_inv[k][l] += o.sigma2d_inv[k][l];
            }
        }
        self.base_opacity += o.base_opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }
}

/// Backward pass of [`rasterize`] for `L = Σ grad_image · image`.
/// Returns per-fragment gradients and the background gradient.
pub fn rasterize_backward(
    fragments: &[SplatFragment],
    bins: &TileBins,
    width: usize,
    height: usize,
    background: Vec3,
    grad_rgb: &[f64],
    settings: &RenderSettings,
) -> Result<(Vec<FragmentGrad>, Vec3)> {
    if grad_rgb.len() != width * height * 3 {
        return Err(Error::Contract(format!(
            "image gradient has {} values, expected {}",
            grad_rgb.len(),
            width * height * 3
        )));
    }
    struct Contribution {
        slot: usize,
        alpha: f64,
        density: f64,
        transmittance: f64,
    }
    let per_tile: Vec<(Vec<FragmentGrad>, Vec3)> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let mut local = vec![FragmentGrad::default(); list.len()];
            let mut dbg = [0.0; 3];
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in tile_pixels(bins, tile, width, height) {
                let p = y * width + x;
                let g = [grad_rgb[p * 3], grad_rgb[p * 3 + 1], grad_rgb[p * 3 + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                contribs.clear();
                let mut t = 1.0;
                for (slot, &fi) in list.iter().enumerate() {
                    let f = &fragments[fi as usize];
                    let Some((alpha, density)) = fragment_alpha(f, px, py, settings) else {
                        continue;
                    };
                    contribs.push(Contribution {
                        slot,
                        alpha,
                        density,
                        transmittance: t,
                    });
                    t *= 1.0 - alpha;
                    if t < settings.transmittance_min {
                        break;
                    }
                }
                for k in 0..3 {
                    dbg[k] += g[k] * t;
                }
                // color of everything behind fragment i, as seen through i
                let mut behind = background;
                for c in contribs.iter().rev() {
                    let f = &fragments[list[c.slot] as usize];
                    let out = &mut local[c.slot];
                    let w = c.alpha * c.transmittance;
                    let mut dalpha = 0.0;
                    for k in 0..3 {
                        out.color[k] += g[k] * w;
                        dalpha += g[k] * c.transmittance * (f.color[k] - behind[k]);
                    }
                    for k in 0..3 {
                        behind[k] = f.color[k] * c.alpha + (1.0 - c.alpha) * behind[k];
                    }
                    if f.base_opacity * c.density > settings.alpha_max {
                        continue; // clipped: alpha is locally constant
                    }
                    out.base_opacity += dalpha * c.density;
                    let ddensity = dalpha * f.base_opacity;
                    // G = exp(-½ dᵀ A d), d = pixel − mean
                    let d = [px - f.pixel_mean[0], py - f.pixel_mean[1]];
                    let a = &f.sigma2d_inv;
                    let dq = -0.5 * ddensity * c.density;
                    for i in 0..2 {
                        for j in 0..2 {
                            out.sigma2d_inv[i][j] += dq * d[i] * d[j];
                        }
                    }
                    let ad = [
                        (a[0][0] + a[0][0]) * d[0] + (a[0][1] + a[1][0]) * d[1],
                        (a[1][0] + a[0][1]) * d[0] + (a[1][1] + a[1][1]) * d[1],
                    ];
                    out.pixel_mean[0] -= dq * ad[0];
                    out.pixel_mean[1] -= dq * ad[1];
                }
            }
            (local, dbg)
        })
        .collect();

    let mut grads = vec![FragmentGrad::default(); fragments.len()];
    let mut dbg = [0.0; 3];
    for (tile, (local, tile_bg)) in per_tile.iter().enumerate() {
        for (slot, &fi) in bins.lists[tile].iter().enumerate() {
            grads[fi as usize].add(&local[slot]);
        }
        for k in 0..3 {
            dbg[k] += tile_bg[k];
        }
    }
    Ok((grads, dbg))
}

/// Appearance and pose of a field, ready to render.
#[derive(Debug, Clone, Copy)]
pub struct SplatInputs<'a> {
    pub posed: &'a PosedGaussians,
    /// N opacity logits.
    pub opacity_logit: &'a [f64],
    /// N×B×3 spherical-harmonic coefficients.
    pub sh_coeffs: &'a [f64],
    pub sh_bases: usize,
}

impl SplatInputs<'_> {
    pub fn count(&self) -> usize {
        self.posed.mu.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.count();
        if self.posed.rotation.len() != n
            || self.posed.log_scale.len() != n
            || self.opacity_logit.len() != n
            || self.sh_coeffs.len() != n * self.sh_bases * 3
        {
            return Err(Error::Dimension(format!(
                "inconsistent splat inputs for {n} primitives"
            )));
        }
        Ok(())
    }
}

/// Projection intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    index: usize,
    mean_view: Vec3,
    sigma3: Mat3,
    view_offset: Vec3,
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub fragments: Vec<SplatFragment>,
    pub bins: TileBins,
    pub camera: Camera,
    pub background: Vec3,
    pub settings: RenderSettings,
    count: usize,
    projected: Vec<Projected>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub mu: Vec<Vec3>,
    pub rotation: Vec<Quat>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub background: Vec3,
}

/// Projects every primitive; culled ones (behind the near plane or with a
/// singular screen covariance) produce no fragment.
pub fn project_splats(inputs: &SplatInputs, cam: &Camera) -> Result<Vec<SplatFragment>> {
    Ok(project_with_intermediates(inputs, cam)?.0)
}

fn project_with_intermediates(inputs: &SplatInputs, cam: &Camera) -> Result<(Vec<SplatFragment>, Vec<Projected>)> {
    inputs.validate()?;
    let center = cam.center();
    let stride = inputs.sh_bases * 3;
    let mut fragments = Vec::with_capacity(inputs.count());
    let mut projected = Vec::with_capacity(inputs.count());
    for i in 0..inputs.count() {
        let mu = inputs.posed.mu[i];
        let mean_view = cam.to_view(mu);
        if mean_view[2] <= geometry::NEAR_PLANE {
            continue;
        }
        let sigma3 = geometry::build_covariance(inputs.posed.rotation[i], inputs.posed.log_scale[i])?;
        let Some(sigma2d) = geometry::project_covariance(&sigma3, mean_view, cam) else {
            continue;
        };
        let Some(conic) = geometry::invert2(&sigma2d) else {
            continue;
        };
        let view_offset = sub3(mu, center);
        let dir = normalize3(view_offset).unwrap_or([0.0, 0.0, 1.0]);
        let color = geometry::eval_sh_color(&inputs.sh_coeffs[i * stride..(i + 1) * stride], dir)?;
        fragments.push(SplatFragment {
            gaussian_index: i,
            pixel_mean: cam.project(mean_view),
            sigma2d_inv: conic,
            sigma2d,
            depth: mean_view[2],
            color,
            base_opacity: geometry::sigmoid(inputs.opacity_logit[i]),
        });
        projected.push(Projected {
            index: i,
            mean_view,
            sigma3,
            view_offset,
        });
    }
    Ok((fragments, projected))
}

/// Forward render of a posed field.
pub fn render(
    inputs: &SplatInputs,
    cam: &Camera,
    background: Vec3,
    settings: &RenderSettings,
) -> Result<(ImageBuffer, RenderState)> {
    let (fragments, projected) = project_with_intermediates(inputs, cam)?;
    let (image, bins) = rasterize(&fragments, cam.width, cam.height, background, settings);
    Ok((
        image,
        RenderState {
            fragments,
            bins,
            camera: cam.clone(),
            background,
            settings: *settings,
            count: inputs.count(),
            projected,
        },
    ))
}

/// Gradients of `Σ grad_rgb · image` with respect to every primitive input.
pub fn render_backward(inputs: &SplatInputs, state: &RenderState, grad_rgb: &[f64]) -> Result<SplatGrads> {
    inputs.validate()?;
    if inputs.count() != state.count {
        return Err(Error::Contract(format!(
            "render state was built for {} primitives, got {}",
            state.count,
            inputs.count()
        )));
    }
    let cam = &state.camera;
    let (frag_grads, dbg) = rasterize_backward(
        &state.fragments,
        &state.bins,
        cam.width,
        cam.height,
        state.background,
        grad_rgb,
        &state.settings,
    )?;
    let n = inputs.count();
    let stride = inputs.sh_bases * 3;
    let mut out = SplatGrads {
        mu: vec![[0.0; 3]; n],
        rotation: vec![[0.0; 4]; n],
        log_scale: vec![[0.0; 3]; n],
        opacity_logit: vec![0.0; n],
        sh_coeffs: vec![0.0; n * stride],
        background: dbg,
    };
    for ((frag, fg), pj) in state.fragments.iter().zip(&frag_grads).zip(&state.projected) {
        let i = pj.index;
        let o = frag.base_opacity;
        out.opacity_logit[i] = fg.base_opacity * o * (1.0 - o);

        let dir = normalize3(pj.view_offset).unwrap_or([0.0, 0.0, 1.0]);
        let (dsh, ddir) = geometry::eval_sh_color_vjp(&inputs.sh_coeffs[i * stride..(i + 1) * stride], dir, fg.color);
        out.sh_coeffs[i * stride..(i + 1) * stride].copy_from_slice(&dsh);
        let mut dmu = [0.0; 3];
        let len = norm3(pj.view_offset);
        if len > 0.0 {
            let dd = dot3(dir, ddir);
            for k in 0..3 {
                dmu[k] += (ddir[k] - dir[k] * dd) / len;
            }
        }

        let dcov2 = geometry::invert2_vjp(&frag.sigma2d_inv, &fg.sigma2d_inv);
        let (dsigma3, mut dview) = geometry::project_covariance_vjp(&pj.sigma3, pj.mean_view, cam, &dcov2);
        let (dq, dls) = geometry::build_covariance_vjp(inputs.posed.rotation[i], inputs.posed.log_scale[i], &dsigma3)?;
        out.rotation[i] = dq;
        out.log_scale[i] = dls;

        let [x, y, z] = pj.mean_view;
        dview[0] += fg.pixel_mean[0] * cam.fx / z;
        dview[1] += fg.pixel_mean[1] * cam.fy / z;
        dview[2] -= fg.pixel_mean[0] * cam.fx * x / (z * z) + fg.pixel_mean[1] * cam.fy * y / (z * z);
        let dworld = mat3t_vec(&cam.rotation, dview);
        out.mu[i] = add3(dmu, dworld);
    }
    Ok(out)
}
