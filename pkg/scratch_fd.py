"""Scratch: finite-difference validation of render_backward (not shipped)."""
import numpy as np
from splatslam.geometry import CameraIntrinsics, Pose, Twist, se3_exp, se3_compose
from splatslam.gaussians import GaussianSet
from splatslam.render import render, render_backward

rng = np.random.default_rng(7)
K = CameraIntrinsics(fx=30.0, fy=28.0, cx=15.5, cy=11.5, width=32, height=24)


def make_scene(n, rng):
    gs = GaussianSet()
    means = rng.uniform([-0.5, -0.4, 1.2], [0.5, 0.4, 2.5], size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.05, 0.25, size=(n, 3))
    opac = rng.uniform(0.3, 0.9, size=n)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    gs.append_arrays(means, quats, scales, opac, colors,
                     np.zeros(n), np.zeros(n, dtype=np.int64), np.arange(n))
    return gs


def loss(gs, pose, wC, wD):
    f = render([gs], pose, K)
    return float(np.sum(f.color * wC) + np.sum(f.depth * wD))


n = 8
gs = make_scene(n, rng)
pose = se3_exp(Twist(rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.05))
wC = rng.normal(size=(24, 32, 3))
wD = rng.normal(size=(24, 32))

frame = render([gs], pose, K)
g = render_backward(frame, wC, wD, [gs], pose, K)

h = 1e-5
worst = {}

def fd_param(arr, i, j, setter):
    orig = arr[i, j] if j is not None else arr[i]
    def set_val(v):
        if j is not None:
            arr[i, j] = v
        else:
            arr[i] = v
    set_val(orig + h); lp = loss(gs, pose, wC, wD)
    set_val(orig - h); lm = loss(gs, pose, wC, wD)
    set_val(orig)
    return (lp - lm) / (2 * h)

def check(name, analytic, fd):
    denom = max(abs(fd), abs(analytic), 1e-6)
    rel = abs(analytic - fd) / denom
    worst[name] = max(worst.get(name, 0.0), rel)

for i in range(n):
    for j in range(3):
        check("means", g.d_means[i, j], fd_param(gs.means, i, j, None))
        check("scales", g.d_scales[i, j], fd_param(gs.scales, i, j, None))
        check("colors", g.d_colors[i, j], fd_param(gs.colors, i, j, None))
    for j in range(4):
        check("rot", g.d_rotations[i, j], fd_param(gs.rotations, i, j, None))
    check("opac", g.d_opacities[i], fd_param(gs.opacities, i, None, None))

for k in range(6):
    e = np.zeros(6)
    e[k] = h
    lp = loss(gs, se3_compose(se3_exp(Twist.from_vector(e)), pose), wC, wD)
    lm = loss(gs, se3_compose(se3_exp(Twist.from_vector(-e)), pose), wC, wD)
    fd = (lp - lm) / (2 * h)
    check("pose", g.d_pose[k], fd)

for k, v in worst.items():
    print(f"{k:8s} worst rel err {v:.3e}")
