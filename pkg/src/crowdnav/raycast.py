"""Grid ray traversal (Amanatides & Woo) and ray/circle intersection kernels."""
import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _cast_one(blocked, res, ox, oy, px, py, angle, max_range):
    h, w = blocked.shape
    gx = (px - ox) / res
    gy = (py - oy) / res
    ix = int(math.floor(gx))
    iy = int(math.floor(gy))
    if ix < 0 or ix >= w or iy < 0 or iy >= h or blocked[iy, ix]:
        return 0.0
    dx = math.cos(angle)
    dy = math.sin(angle)
    if dx > 0.0:
        step_x = 1
        t_max_x = (ix + 1 - gx) * res / dx
        t_delta_x = res / dx
    elif dx < 0.0:
        step_x = -1
        t_max_x = (gx - ix) * res / -dx
        t_delta_x = res / -dx
    else:
        step_x = 0
        t_max_x = math.inf
        t_delta_x = math.inf
    if dy > 0.0:
        step_y = 1
        t_max_y = (iy + 1 - gy) * res / dy
        t_delta_y = res / dy
    elif dy < 0.0:
        step_y = -1
        t_max_y = (gy - iy) * res / -dy
        t_delta_y = res / -dy
    else:
        step_y = 0
        t_max_y = math.inf
        t_delta_y = math.inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_delta_y
        if t >= max_range:
            return max_range
        # leaving the map counts as hitting its boundary
        if ix < 0 or ix >= w or iy < 0 or iy >= h or blocked[iy, ix]:
            return t


@numba.njit(cache=True)
def cast_rays(blocked, res, ox, oy, px, py, angles, max_range):
    """Range to the first blocked-cell boundary for each (px[i], py[i], angles[i])."""
    n = angles.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _cast_one(blocked, res, ox, oy, px[i], py[i], angles[i], max_range)
    return out


@numba.njit(cache=True)
def cast_fan(blocked, res, ox, oy, px, py, heading, rel_angles, max_range):
    """Cast a fan of rays from a single pose."""
    n = rel_angles.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _cast_one(blocked, res, ox, oy, px, py, heading + rel_angles[i], max_range)
    return out


@numba.njit(cache=True)
def cast_particles(blocked, res, ox, oy, xs, ys, headings, rel_angles, max_range):
    """Expected ranges (n_particles, n_beams) for a decimated beam set."""
    n = xs.shape[0]
    m = rel_angles.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = _cast_one(blocked, res, ox, oy, xs[i], ys[i], headings[i] + rel_angles[j], max_range)
    return out


@numba.njit(cache=True)
def circle_ranges(px, py, heading, rel_angles, cx, cy, radii, ranges, max_range):
    """Clip ``ranges`` in place by the first intersection with each circle."""
    n = rel_angles.shape[0]
    for k in range(cx.shape[0]):
        ox = cx[k] - px
        oy = cy[k] - py
        c2 = ox * ox + oy * oy - radii[k] * radii[k]
        if c2 <= 0.0:
            for i in range(n):
                ranges[i] = 0.0
            continue
        dist = math.sqrt(ox * ox + oy * oy)
        if dist - radii[k] >= max_range:
            continue
        for i in range(n):
            a = heading + rel_angles[i]
            b = ox * math.cos(a) + oy * math.sin(a)
            if b <= 0.0:
                continue
            disc = b * b - c2
            if disc < 0.0:
                continue
            t = b - math.sqrt(disc)
            if t < ranges[i]:
                ranges[i] = t
    return ranges
