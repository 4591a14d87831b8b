"""Compiled inner loops. Every kernel writes disjoint outputs per pixel, so
results do not depend on thread count."""

import math

import numba
import numpy as np

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
CUTOFF_RHO = 9.0  # 3 sigma, in squared local units
LOWPASS_SIGMA2 = 0.707 * 0.707


# column layout of the packed per-(tile, splat) rows consumed by `blend`
C_P, C_A, C_B, C_N = 0, 3, 6, 9
C_SU, C_SV, C_CTR, C_BOX, C_OP, C_ATTR = 12, 13, 14, 16, 20, 21


@numba.njit(cache=True, inline="always")
def _response(px, py, dx, dy, R, k, near):
    """Merged response of packed row k at one pixel. Returns (G, branch, D, u, v)."""
    gs = 0.0
    pz = R[k, 2]
    D = pz
    u = 0.0
    v = 0.0
    M = R[k, 9] * dx + R[k, 10] * dy + R[k, 11]
    if abs(M) > 1e-8:
        t = (R[k, 9] * R[k, 0] + R[k, 10] * R[k, 1] + R[k, 11] * pz) / M
        if t > near:
            e0 = t * dx - R[k, 0]
            e1 = t * dy - R[k, 1]
            e2 = t - pz
            uu = (e0 * R[k, 3] + e1 * R[k, 4] + e2 * R[k, 5]) / R[k, 12]
            vv = (e0 * R[k, 6] + e1 * R[k, 7] + e2 * R[k, 8]) / R[k, 13]
            rho = uu * uu + vv * vv
            if rho <= CUTOFF_RHO:
                gs = math.exp(-0.5 * rho)
                D = t
                u = uu
                v = vv
    ddx = px - R[k, 14]
    ddy = py - R[k, 15]
    r2 = ddx * ddx + ddy * ddy
    gl = 0.0
    if r2 <= CUTOFF_RHO * LOWPASS_SIGMA2:
        gl = math.exp(-0.5 * r2 / LOWPASS_SIGMA2)
    if gl > gs:
        return gl, 2, pz, u, v
    if gs > 0.0:
        return gs, 1, D, u, v
    return 0.0, 0, pz, u, v


@numba.njit(cache=True)
def blend(width, height, tile, fx, fy, cx, cy, near, nattr, ROWS, BOX, tile_offsets, tile_prims,
          starts, counts, e_prim, e_alpha, e_T, e_D, e_branch, e_u, e_v, e_G, sums):
    """Front-to-back blending, tile by tile.

    ROWS holds one packed row per (tile, splat) pair, in tile_prims order;
    BOX repeats their bounding boxes compactly for the cheap rejection test.
    Entries are appended in tile order, so each pixel's contributors are
    contiguous (starts/counts) but pixels are not globally sorted. Returns
    the number of entries written, or -1 if the entry buffers are too small.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    cap = e_prim.shape[0]
    q = 0
    for tid in range(tiles_x * tiles_y):
        tx = tid % tiles_x
        ty = tid // tiles_x
        start = tile_offsets[tid]
        stop = tile_offsets[tid + 1]
        for yy in range(ty * tile, min((ty + 1) * tile, height)):
            for xx in range(tx * tile, min((tx + 1) * tile, width)):
                pix = yy * width + xx
                px = xx + 0.5
                py = yy + 0.5
                dx = (px - cx) / fx
                dy = (py - cy) / fy
                T = 1.0
                starts[pix] = q
                q0 = q
                for k in range(start, stop):
                    if px < BOX[k, 0] or px > BOX[k, 1] or py < BOX[k, 2] or py > BOX[k, 3]:
                        continue
                    G, br, D, u, v = _response(px, py, dx, dy, ROWS, k, near)
                    if br == 0:
                        continue
                    alpha = ROWS[k, C_OP] * G
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    newT = T * (1.0 - alpha)
                    if newT < T_MIN:
                        break
                    if q >= cap:
                        return -1
                    e_prim[q] = tile_prims[k]
                    e_alpha[q] = alpha
                    e_T[q] = T
                    e_D[q] = D
                    e_branch[q] = br
                    e_u[q] = u
                    e_v[q] = v
                    e_G[q] = G
                    w = alpha * T
                    for c in range(nattr):
                        sums[pix, c] += w * ROWS[k, C_ATTR + c]
                    sums[pix, nattr] += w * D
                    sums[pix, nattr + 1] += w
                    q += 1
                    T = newT
                counts[pix] = q - q0
    return q


@numba.njit(cache=True, parallel=True)
def distortion_pass(starts, counts, w, D, dist, d_w, d_D):
    """sum_{i,j} w_i w_j |D_i - D_j| per pixel via prefix sums in depth order,
    plus its partials with respect to every w_i and D_i."""
    npix = starts.shape[0]
    for pix in numba.prange(npix):
        s = starts[pix]
        e = s + counts[pix]
        k = e - s
        if k < 2:
            dist[pix] = 0.0
            for q in range(s, e):
                d_w[q] = 0.0
                d_D[q] = 0.0
            continue
        order = np.argsort(D[s:e], kind="mergesort")
        wtot = 0.0
        stot = 0.0
        for q in range(s, e):
            wtot += w[q]
            stot += w[q] * D[q]
        W_lo = 0.0
        S_lo = 0.0
        acc = 0.0
        for r in range(k):
            q = s + order[r]
            W_hi = wtot - W_lo - w[q]
            S_hi = stot - S_lo - w[q] * D[q]
            lo = D[q] * W_lo - S_lo
            hi = S_hi - D[q] * W_hi
            acc += w[q] * lo
            d_w[q] = 2.0 * (lo + hi)
            d_D[q] = 2.0 * w[q] * (W_lo - W_hi)
            W_lo += w[q]
            S_lo += w[q] * D[q]
        dist[pix] = 2.0 * acc


@numba.njit(cache=True)
def raster_backward(width, fx, fy, cx, cy, starts, counts, e_splat, e_alpha, e_T, e_D, e_branch,
                    e_u, e_v, e_G, dist_dw, dist_dD, ATTR, OP, P, A, B, N, SU, SV,
                    g_attr_pix, g_S, g_A, g_dist,
                    g_attr, g_opac, g_p, g_a, g_b, g_su, g_sv, gw, galpha):
    """Reverse pass over all retained contributors, accumulating per-splat
    gradients sequentially (fixed order, hence deterministic).

    g_attr_pix holds per-pixel upstream gradients for the blended attribute
    channels (matching ATTR's columns); g_attr receives sum_pixels w * g.
    """
    npix = starts.shape[0]
    nattr = ATTR.shape[1]
    for pix in range(npix):
        s = starts[pix]
        e = s + counts[pix]
        if e == s:
            continue
        for q in range(s, e):
            j = e_splat[q]
            acc = g_S[pix] * e_D[q] + g_A[pix] + g_dist[pix] * dist_dw[q]
            for c in range(nattr):
                acc += g_attr_pix[pix, c] * ATTR[j, c]
            gw[q] = acc
        tail = 0.0
        for q in range(e - 1, s - 1, -1):
            w = e_alpha[q] * e_T[q]
            galpha[q] = e_T[q] * gw[q] - tail / (1.0 - e_alpha[q])
            tail += w * gw[q]

        px = pix % width + 0.5
        py = pix // width + 0.5
        dx = (px - cx) / fx
        dy = (py - cy) / fy
        for q in range(s, e):
            j = e_splat[q]
            w = e_alpha[q] * e_T[q]
            for c in range(nattr):
                g_attr[j, c] += w * g_attr_pix[pix, c]
            gD = g_S[pix] * w + g_dist[pix] * dist_dD[q]
            G = e_G[q]
            ga = galpha[q]
            if OP[j] * G > ALPHA_MAX:
                ga = 0.0
            g_opac[j] += ga * G
            gG = ga * OP[j]
            if e_branch[q] == 1:
                u = e_u[q]
                v = e_v[q]
                gu = -gG * u * G
                gv = -gG * v * G
                su = SU[j]
                sv = SV[j]
                t = e_D[q]
                Mden = N[j, 0] * dx + N[j, 1] * dy + N[j, 2]
                e0 = t * dx - P[j, 0]
                e1 = t * dy - P[j, 1]
                e2 = t - P[j, 2]
                ge0 = gu / su * A[j, 0] + gv / sv * B[j, 0]
                ge1 = gu / su * A[j, 1] + gv / sv * B[j, 1]
                ge2 = gu / su * A[j, 2] + gv / sv * B[j, 2]
                g_su[j] += -gu * u / su
                g_sv[j] += -gv * v / sv
                gt = ge0 * dx + ge1 * dy + ge2 + gD
                k = gt / Mden
                # d/dn of t = (n.p)/(n.d) is (p - t d)/M = -e/M
                gn0 = -k * e0
                gn1 = -k * e1
                gn2 = -k * e2
                g_p[j, 0] += -ge0 + k * N[j, 0]
                g_p[j, 1] += -ge1 + k * N[j, 1]
                g_p[j, 2] += -ge2 + k * N[j, 2]
                a0 = A[j, 0]
                a1 = A[j, 1]
                a2 = A[j, 2]
                b0 = B[j, 0]
                b1 = B[j, 1]
                b2 = B[j, 2]
                # n = a x b:  dL/da = b x gn,  dL/db = gn x a
                g_a[j, 0] += gu / su * e0 + (b1 * gn2 - b2 * gn1)
                g_a[j, 1] += gu / su * e1 + (b2 * gn0 - b0 * gn2)
                g_a[j, 2] += gu / su * e2 + (b0 * gn1 - b1 * gn0)
                g_b[j, 0] += gv / sv * e0 + (gn1 * a2 - gn2 * a1)
                g_b[j, 1] += gv / sv * e1 + (gn2 * a0 - gn0 * a2)
                g_b[j, 2] += gv / sv * e2 + (gn0 * a1 - gn1 * a0)
            elif e_branch[q] == 2:
                z = P[j, 2]
                cxp = fx * P[j, 0] / z + cx
                cyp = fy * P[j, 1] / z + cy
                gc = gG * G / LOWPASS_SIGMA2
                gcx = gc * (px - cxp)
                gcy = gc * (py - cyp)
                g_p[j, 0] += gcx * fx / z
                g_p[j, 1] += gcy * fy / z
                g_p[j, 2] += -(gcx * fx * P[j, 0] + gcy * fy * P[j, 1]) / (z * z) + gD
