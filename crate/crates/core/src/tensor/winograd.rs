//! Winograd F(2x2, 3x3) for stride-1, padding-1 convolutions.
//!
//! Each 2x2 output tile is computed from a 4x4 input tile with 16
//! elementwise products per channel pair instead of 36. The products become
//! 16 independent GEMMs over channels, so the transforms are the only extra
//! work. Both spatial extents must be even.
//!
//! With `B`, `G`, `A` the usual transform matrices:
//!
//! ```text
//! V = Bt d B      U = G g Gt      Y = At (U . V) A
//! ```
//!
//! The backward pass applies the transposed transforms in reverse order.
//! Tiles are processed a few tile rows at a time so that the
//! transform-domain data of a block stays in cache between the transforms
//! and the GEMMs.

use super::{Scalar, View, ViewMut};

/// Transform-domain coefficients per tile.
const POINTS: usize = 16;

/// Padding between the per-point matrices, in elements. Without it the 16
/// matrices often start a power of two apart and the transforms, which touch
/// all of them at once, keep evicting each other from the same cache sets.
const SKEW: usize = 16;

/// Bytes of transform-domain data (input and output side) per block.
const BLOCK_BYTES: usize = 1 << 20;

/// Geometry of one sample.
#[derive(Debug, Clone, Copy)]
pub(super) struct Tiling {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// A run of whole tile rows starting at tile row `first`.
#[derive(Debug, Clone, Copy)]
struct Block {
    first: usize,
    rows: usize,
    /// Tiles in the block; the column count of every per-point matrix.
    tiles: usize,
}

impl Block {
    /// Distance between consecutive points of a `[point][channel][tile]`
    /// buffer with `channels` rows.
    fn stride(&self, channels: usize) -> usize {
        channels * self.tiles + SKEW
    }
}

impl Tiling {
    pub fn applies(h: usize, w: usize) -> bool {
        h.is_multiple_of(2) && w.is_multiple_of(2) && h > 0 && w > 0
    }

    fn tile_cols(&self) -> usize {
        self.w / 2
    }

    fn padded_width(&self) -> usize {
        self.w + 2
    }

    fn padded_plane(&self) -> usize {
        (self.h + 2) * self.padded_width()
    }

    fn blocks(&self, rows_per_block: usize) -> impl Iterator<Item = Block> {
        let (total, tw) = (self.h / 2, self.tile_cols());
        (0..total).step_by(rows_per_block).map(move |first| {
            let rows = rows_per_block.min(total - first);
            Block {
                first,
                rows,
                tiles: rows * tw,
            }
        })
    }

    fn default_block_rows<T>(&self) -> usize {
        let per_row =
            POINTS * (self.c_in + self.c_out) * self.tile_cols() * std::mem::size_of::<T>();
        (BLOCK_BYTES / per_row).clamp(1, self.h / 2)
    }

    /// Zero-padded copy of every input channel.
    ///
    /// Each padded row is stored de-interleaved: its `tw + 1` even columns,
    /// then its `tw + 1` odd columns. A tile starting at padded column
    /// `2 tx` then reads `even[tx], odd[tx], even[tx + 1], odd[tx + 1]`, so
    /// every transform loop runs over contiguous memory.
    fn pad<T: Scalar>(&self, x: &[T], padded: &mut Vec<T>) {
        let (h, w, pw, plane) = (self.h, self.w, self.padded_width(), self.padded_plane());
        let half = pw / 2;
        padded.clear();
        padded.resize(self.c_in * plane, T::zero());
        for ci in 0..self.c_in {
            for y in 0..h {
                let (even, odd) = padded[ci * plane + (y + 1) * pw..][..pw].split_at_mut(half);
                // Input column c sits at padded column c + 1.
                for (k, pair) in x[(ci * h + y) * w..][..w].chunks_exact(2).enumerate() {
                    odd[k] = pair[0];
                    even[k + 1] = pair[1];
                }
            }
        }
    }

    /// Inverse of the layout of [`Self::pad`] for the interior of one row.
    fn unpad_row<T: Scalar>(&self, row: &[T], out: &mut [T]) {
        let (even, odd) = row.split_at(self.padded_width() / 2);
        for (k, pair) in out.chunks_exact_mut(2).enumerate() {
            pair[0] = odd[k];
            pair[1] = even[k + 1];
        }
    }

    /// `V[point][ci][tile]` for the tiles of one block.
    fn input_transform<T: Scalar>(&self, padded: &[T], block: Block, v: &mut Vec<T>) {
        let (tw, pw, plane) = (self.tile_cols(), self.padded_width(), self.padded_plane());
        let (n, vps) = (block.tiles, block.stride(self.c_in));
        v.resize(POINTS * vps, T::zero());
        let mut q = vec![T::zero(); 4 * pw];
        let mut lanes = vec![T::zero(); 4 * tw];
        for ci in 0..self.c_in {
            for r in 0..block.rows {
                let ty = block.first + r;
                let rows = &padded[ci * plane + 2 * ty * pw..][..4 * pw];
                let (d0, d1, d2, d3) = (
                    &rows[..pw],
                    &rows[pw..2 * pw],
                    &rows[2 * pw..3 * pw],
                    &rows[3 * pw..],
                );
                let (q0, rest) = q.split_at_mut(pw);
                let (q1, rest) = rest.split_at_mut(pw);
                let (q2, q3) = rest.split_at_mut(pw);
                for c in 0..pw {
                    q0[c] = d0[c] - d2[c];
                    q1[c] = d1[c] + d2[c];
                    q2[c] = d2[c] - d1[c];
                    q3[c] = d1[c] - d3[c];
                }
                for (i, qi) in q.chunks_exact(pw).enumerate() {
                    let (even, odd) = qi.split_at(tw + 1);
                    let (e0, e1, o0, o1) = (&even[..tw], &even[1..], &odd[..tw], &odd[1..]);
                    let [l0, l1, l2, l3] = lanes4(&mut lanes, tw);
                    for tx in 0..tw {
                        l0[tx] = e0[tx] - e1[tx];
                        l1[tx] = o0[tx] + e1[tx];
                        l2[tx] = e1[tx] - o0[tx];
                        l3[tx] = o0[tx] - o1[tx];
                    }
                    for (j, lane) in lanes.chunks_exact(tw).enumerate() {
                        v[(4 * i + j) * vps + ci * n + r * tw..][..tw].copy_from_slice(lane);
                    }
                }
            }
        }
    }

    /// `U[point][co][ci]` from a `(c_out, c_in, 3, 3)` kernel.
    fn kernel_transform<T: Scalar>(&self, kernel: &[T]) -> Vec<T> {
        let pairs = self.c_out * self.c_in;
        let mut u = vec![T::zero(); POINTS * pairs];
        for (pair, g) in kernel.chunks_exact(9).enumerate() {
            let g = [[g[0], g[1], g[2]], [g[3], g[4], g[5]], [g[6], g[7], g[8]]];
            for (p, &val) in g_g_gt(&g).iter().flatten().enumerate() {
                u[p * pairs + pair] = val;
            }
        }
        u
    }

    /// Convolution of one sample plus bias, written to `dst` as `(c_out, h, w)`.
    pub fn forward<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        bias: &[T],
        dst: &mut [T],
        scratch: &mut Scratch<T>,
    ) {
        self.forward_blocked(
            x,
            kernel,
            bias,
            dst,
            scratch,
            self.default_block_rows::<T>(),
        );
    }

    fn forward_blocked<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        bias: &[T],
        dst: &mut [T],
        scratch: &mut Scratch<T>,
        rows_per_block: usize,
    ) {
        let (w, tw) = (self.w, self.tile_cols());
        let u = self.kernel_transform(kernel);
        self.pad(x, &mut scratch.pad);
        let mut s = vec![T::zero(); 8 * tw];
        let mut pair = vec![T::zero(); 2 * tw];
        for block in self.blocks(rows_per_block) {
            let (n, vps, mps) = (
                block.tiles,
                block.stride(self.c_in),
                block.stride(self.c_out),
            );
            self.input_transform(&scratch.pad, block, &mut scratch.v);
            scratch.m.resize(POINTS * mps, T::zero());
            for p in 0..POINTS {
                T::gemm_view(
                    self.c_out,
                    self.c_in,
                    n,
                    View {
                        data: &u,
                        offset: p * self.c_out * self.c_in,
                        rs: self.c_in,
                        cs: 1,
                    },
                    View {
                        data: &scratch.v,
                        offset: p * vps,
                        rs: n,
                        cs: 1,
                    },
                    ViewMut {
                        data: &mut scratch.m,
                        offset: p * mps,
                        rs: n,
                        cs: 1,
                    },
                    false,
                );
            }
            let m = &scratch.m;
            for co in 0..self.c_out {
                let b = bias[co];
                let plane = &mut dst[co * self.h * w..][..self.h * w];
                for r in 0..block.rows {
                    // At applied across the four rows of every tile in this row.
                    let point =
                        |i: usize, j: usize| &m[(4 * i + j) * mps + co * n + r * tw..][..tw];
                    for j in 0..4 {
                        let (m0, m1, m2, m3) = (point(0, j), point(1, j), point(2, j), point(3, j));
                        let (s0, s1) = s.split_at_mut(4 * tw);
                        for tx in 0..tw {
                            s0[j * tw + tx] = m0[tx] + m1[tx] + m2[tx];
                            s1[j * tw + tx] = m1[tx] - m2[tx] - m3[tx];
                        }
                    }
                    let oy = 2 * (block.first + r);
                    let (top, bottom) = plane[oy * w..][..2 * w].split_at_mut(w);
                    for (half, out) in [top, bottom].into_iter().enumerate() {
                        let sr = &s[4 * half * tw..][..4 * tw];
                        let (s0, s1, s2, s3) = (
                            &sr[..tw],
                            &sr[tw..2 * tw],
                            &sr[2 * tw..3 * tw],
                            &sr[3 * tw..],
                        );
                        let (even, odd) = pair.split_at_mut(tw);
                        for tx in 0..tw {
                            even[tx] = s0[tx] + s1[tx] + s2[tx] + b;
                            odd[tx] = s1[tx] - s2[tx] - s3[tx] + b;
                        }
                        for (o, (&e, &d)) in
                            out.chunks_exact_mut(2).zip(even.iter().zip(odd.iter()))
                        {
                            o[0] = e;
                            o[1] = d;
                        }
                    }
                }
            }
        }
    }

    /// Kernel gradient (overwritten) and, when `dx` is given, the input
    /// gradient (overwritten) of one sample.
    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        dy: &[T],
        dk: &mut [T],
        dx: Option<&mut [T]>,
    ) {
        self.backward_blocked(x, kernel, dy, dk, dx, self.default_block_rows::<T>());
    }

    fn backward_blocked<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        dy: &[T],
        dk: &mut [T],
        dx: Option<&mut [T]>,
        rows_per_block: usize,
    ) {
        let (h, w, tw, pw, plane) = (
            self.h,
            self.w,
            self.tile_cols(),
            self.padded_width(),
            self.padded_plane(),
        );
        let pairs = self.c_out * self.c_in;
        let mut padded = Vec::new();
        self.pad(x, &mut padded);
        let u = dx.is_some().then(|| self.kernel_transform(kernel));
        let mut dpad = dx.is_some().then(|| vec![T::zero(); self.c_in * plane]);
        let mut du = vec![T::zero(); POINTS * pairs];
        let (mut v, mut dm) = (Vec::new(), Vec::new());
        let mut rows = vec![T::zero(); 4 * pw];
        let mut split = vec![T::zero(); 4 * tw];
        let mut lanes = vec![T::zero(); 4 * tw];

        for (index, block) in self.blocks(rows_per_block).enumerate() {
            let (n, vps, mps) = (
                block.tiles,
                block.stride(self.c_in),
                block.stride(self.c_out),
            );
            self.input_transform(&padded, block, &mut v);

            // dM = A dY At for every output tile.
            dm.resize(POINTS * mps, T::zero());
            for co in 0..self.c_out {
                for r in 0..block.rows {
                    let g = &dy[(co * h + 2 * (block.first + r)) * w..][..2 * w];
                    let [ge0, go0, ge1, go1] = lanes4(&mut split, tw);
                    for (k, (a, b)) in g[..w]
                        .chunks_exact(2)
                        .zip(g[w..].chunks_exact(2))
                        .enumerate()
                    {
                        ge0[k] = a[0];
                        go0[k] = a[1];
                        ge1[k] = b[0];
                        go1[k] = b[1];
                    }
                    let (ge0, go0, ge1, go1) = (
                        &split[..tw],
                        &split[tw..2 * tw],
                        &split[2 * tw..3 * tw],
                        &split[3 * tw..],
                    );
                    for i in 0..4 {
                        let [l0, l1, l2, l3] = lanes4(&mut lanes, tw);
                        for k in 0..tw {
                            // Row i of A dY, then A along the row.
                            let (e, o) = match i {
                                0 => (ge0[k], go0[k]),
                                1 => (ge0[k] + ge1[k], go0[k] + go1[k]),
                                2 => (ge0[k] - ge1[k], go0[k] - go1[k]),
                                _ => (T::zero() - ge1[k], T::zero() - go1[k]),
                            };
                            l0[k] = e;
                            l1[k] = e + o;
                            l2[k] = e - o;
                            l3[k] = T::zero() - o;
                        }
                        for (j, lane) in lanes.chunks_exact(tw).enumerate() {
                            dm[(4 * i + j) * mps + co * n + r * tw..][..tw].copy_from_slice(lane);
                        }
                    }
                }
            }

            // dU += dM Vt
            for p in 0..POINTS {
                T::gemm_view(
                    self.c_out,
                    n,
                    self.c_in,
                    View {
                        data: &dm,
                        offset: p * mps,
                        rs: n,
                        cs: 1,
                    },
                    View {
                        data: &v,
                        offset: p * vps,
                        rs: 1,
                        cs: n,
                    },
                    ViewMut {
                        data: &mut du,
                        offset: p * pairs,
                        rs: self.c_in,
                        cs: 1,
                    },
                    index > 0,
                );
            }

            let (Some(u), Some(dpad)) = (u.as_deref(), dpad.as_deref_mut()) else {
                continue;
            };
            // dV = Ut dM, then dd = B dV Bt added over overlapping tiles.
            for p in 0..POINTS {
                T::gemm_view(
                    self.c_in,
                    self.c_out,
                    n,
                    View {
                        data: u,
                        offset: p * pairs,
                        rs: 1,
                        cs: self.c_in,
                    },
                    View {
                        data: &dm,
                        offset: p * mps,
                        rs: n,
                        cs: 1,
                    },
                    ViewMut {
                        data: &mut v,
                        offset: p * vps,
                        rs: n,
                        cs: 1,
                    },
                    false,
                );
            }
            for ci in 0..self.c_in {
                for r in 0..block.rows {
                    // B applied along each tile row, summed where tiles overlap.
                    for (i, ri) in rows.chunks_exact_mut(pw).enumerate() {
                        let point = |j: usize| &v[(4 * i + j) * vps + ci * n + r * tw..][..tw];
                        let (v0, v1, v2, v3) = (point(0), point(1), point(2), point(3));
                        let (even, odd) = ri.split_at_mut(tw + 1);
                        for tx in 0..tw {
                            even[tx] = v0[tx];
                            odd[tx] = v1[tx] - v2[tx] + v3[tx];
                        }
                        even[tw] = T::zero();
                        odd[tw] = T::zero();
                        let (e1, o1) = (&mut even[1..], &mut odd[1..]);
                        for tx in 0..tw {
                            e1[tx] = e1[tx] + v2[tx] + v1[tx] - v0[tx];
                            o1[tx] = o1[tx] - v3[tx];
                        }
                    }
                    let (q0, q1, q2, q3) = (
                        &rows[..pw],
                        &rows[pw..2 * pw],
                        &rows[2 * pw..3 * pw],
                        &rows[3 * pw..],
                    );
                    let out = &mut dpad[ci * plane + 2 * (block.first + r) * pw..][..4 * pw];
                    let (o0, rest) = out.split_at_mut(pw);
                    let (o1, rest) = rest.split_at_mut(pw);
                    let (o2, o3) = rest.split_at_mut(pw);
                    for c in 0..pw {
                        o0[c] = o0[c] + q0[c];
                        o1[c] = o1[c] + q1[c] - q2[c] + q3[c];
                        o2[c] = o2[c] + q2[c] + q1[c] - q0[c];
                        o3[c] = o3[c] - q3[c];
                    }
                }
            }
        }

        // dg = Gt dU G
        for (pair, out) in dk.chunks_exact_mut(9).enumerate() {
            let mut m = [[T::zero(); 4]; 4];
            for (p, e) in m.iter_mut().flatten().enumerate() {
                *e = du[p * pairs + pair];
            }
            for (o, &val) in out.iter_mut().zip(gt_du_g(&m).iter().flatten()) {
                *o = val;
            }
        }
        if let (Some(dx), Some(dpad)) = (dx, dpad) {
            for ci in 0..self.c_in {
                for y in 0..h {
                    self.unpad_row(
                        &dpad[ci * plane + (y + 1) * pw..][..pw],
                        &mut dx[(ci * h + y) * w..][..w],
                    );
                }
            }
        }
    }
}

/// Reusable per-thread buffers for [`Tiling::forward`].
#[derive(Debug)]
pub(super) struct Scratch<T> {
    pad: Vec<T>,
    v: Vec<T>,
    m: Vec<T>,
}

impl<T> Default for Scratch<T> {
    fn default() -> Self {
        Self {
            pad: Vec::new(),
            v: Vec::new(),
            m: Vec::new(),
        }
    }
}

/// Four disjoint `tw`-long lanes of a scratch buffer.
fn lanes4<T>(buf: &mut [T], tw: usize) -> [&mut [T]; 4] {
    let mut it = buf.chunks_exact_mut(tw);
    std::array::from_fn(|_| it.next().expect("buffer holds four lanes"))
}

fn half<T: Scalar>() -> T {
    T::from_f64_lossy(0.5)
}

/// Applies `rows` to every row, then `cols` to every column of the result.
fn separable<T: Copy, const R: usize, const C: usize, const R2: usize, const C2: usize>(
    x: &[[T; C]; R],
    rows: impl Fn([T; C]) -> [T; C2],
    cols: impl Fn([T; R]) -> [T; R2],
) -> [[T; C2]; R2] {
    let tmp: [[T; C2]; R] = std::array::from_fn(|r| rows(x[r]));
    let mut out = [[tmp[0][0]; C2]; R2];
    for c in 0..C2 {
        let col = cols(std::array::from_fn(|r| tmp[r][c]));
        for r in 0..R2 {
            out[r][c] = col[r];
        }
    }
    out
}

fn g<T: Scalar>(k: [T; 3]) -> [T; 4] {
    let h = half::<T>();
    [
        k[0],
        (k[0] + k[1] + k[2]) * h,
        (k[0] - k[1] + k[2]) * h,
        k[2],
    ]
}

fn gt<T: Scalar>(u: [T; 4]) -> [T; 3] {
    let h = half::<T>();
    [
        u[0] + (u[1] + u[2]) * h,
        (u[1] - u[2]) * h,
        u[3] + (u[1] + u[2]) * h,
    ]
}

fn g_g_gt<T: Scalar>(k: &[[T; 3]; 3]) -> [[T; 4]; 4] {
    separable(k, g, g)
}

fn gt_du_g<T: Scalar>(u: &[[T; 4]; 4]) -> [[T; 3]; 3] {
    separable(u, gt, gt)
}
