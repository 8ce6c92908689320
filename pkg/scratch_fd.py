"""Ad-hoc finite-difference validation of the renderer backward (dev only)."""
import numpy as np

from splatba.geometry import CameraIntrinsics, CameraPose, rot6d_to_matrix
from splatba.gaussians import GaussianSet
from splatba.renderer import RenderConfig, render, render_with_gradients

rng = np.random.default_rng(7)
N = 40
H = W = 24

centers = np.column_stack([
    rng.uniform(-1.5, 1.5, N),
    rng.uniform(-1.5, 1.5, N),
    rng.uniform(3.0, 7.0, N),
])
quats = rng.normal(size=(N, 4))
log_scales = rng.uniform(np.log(0.05), np.log(0.25), (N, 3))
opacity_logits = rng.uniform(-1.5, 1.5, N)
deg = 1
k = (deg + 1) ** 2
sh = rng.uniform(-0.6, 0.6, (N, k, 3))

gs = GaussianSet(centers, quats, log_scales, opacity_logits, sh, deg)
K = CameraIntrinsics(2 * np.arctan(0.5), W, H)

# a mildly rotated/translated target pose
axis = rng.normal(size=3); axis /= np.linalg.norm(axis)
ang = 0.15
Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
R = np.eye(3) + np.sin(ang) * Kx + (1 - np.cos(ang)) * Kx @ Kx
pose = CameraPose(R, np.array([0.3, -0.2, 0.1]))

G = rng.uniform(-1.0, 1.0, (H, W, 3))
bg = np.array([0.1, 0.2, 0.3])
cfg = RenderConfig()


def loss_for(gset, p=pose, fov=K.fov_rad):
    Ki = CameraIntrinsics(fov, W, H)
    out = render(gset, Ki, p, background=bg, config=cfg)
    return float(np.sum(G * out.color))


out, grads = render_with_gradients(gs, K, pose, G, background=bg, config=cfg)
print("forward loss:", loss_for(gs))

h = 1e-4


def check(name, analytic, plus_fn, minus_fn):
    fd = (plus_fn() - minus_fn()) / (2 * h)
    err = abs(analytic - fd)
    tol = max(1e-3 * max(abs(analytic), abs(fd)), 1e-6)
    status = "ok " if err <= tol else "FAIL"
    print(f"{status} {name:28s} analytic={analytic:+.8e} fd={fd:+.8e} err={err:.2e}")
    return err <= tol


def perturbed(field, idx, delta):
    arrs = dict(
        centers=centers.copy(), quats=quats.copy(), log_scales=log_scales.copy(),
        opacity_logits=opacity_logits.copy(), sh=sh.copy(),
    )
    arrs[field][idx] += delta
    return GaussianSet(arrs["centers"], arrs["quats"], arrs["log_scales"],
                       arrs["opacity_logits"], arrs["sh"], deg)


ok = True
for trial in range(6):
    i = rng.integers(N)
    j = rng.integers(3)
    ok &= check(f"center[{i},{j}]", grads.d_centers[i, j],
                lambda: loss_for(perturbed("centers", (i, j), h)),
                lambda: loss_for(perturbed("centers", (i, j), -h)))
    jq = rng.integers(4)
    ok &= check(f"quat[{i},{jq}]", grads.d_quats[i, jq],
                lambda: loss_for(perturbed("quats", (i, jq), h)),
                lambda: loss_for(perturbed("quats", (i, jq), -h)))
    ok &= check(f"log_scale[{i},{j}]", grads.d_log_scales[i, j],
                lambda: loss_for(perturbed("log_scales", (i, j), h)),
                lambda: loss_for(perturbed("log_scales", (i, j), -h)))
    ok &= check(f"opacity[{i}]", grads.d_opacity_logits[i],
                lambda: loss_for(perturbed("opacity_logits", i, h)),
                lambda: loss_for(perturbed("opacity_logits", i, -h)))
    jk = rng.integers(k)
    ok &= check(f"sh[{i},{jk},{j}]", grads.d_sh[i, jk, j],
                lambda: loss_for(perturbed("sh", (i, jk, j), h)),
                lambda: loss_for(perturbed("sh", (i, jk, j), -h)))

# pose translation
for j in range(3):
    def plus(j=j):
        T = pose.translation.copy(); T[j] += h
        return loss_for(gs, CameraPose(pose.rotation, T))
    def minus(j=j):
        T = pose.translation.copy(); T[j] -= h
        return loss_for(gs, CameraPose(pose.rotation, T))
    ok &= check(f"T_target[{j}]", grads.d_translation[j], plus, minus)

# pose rotation via rot6 parameterization FD vs chained matrix grad
from splatba.geometry import rot6d_to_matrix_vjp, PoseParams6D
p6 = PoseParams6D.from_pose(pose)
d_rot6 = rot6d_to_matrix_vjp(p6.rot6, grads.d_rotation)
for j in range(6):
    def plus(j=j):
        r = p6.rot6.copy(); r[j] += h
        return loss_for(gs, CameraPose(rot6d_to_matrix(r), pose.translation))
    def minus(j=j):
        r = p6.rot6.copy(); r[j] -= h
        return loss_for(gs, CameraPose(rot6d_to_matrix(r), pose.translation))
    ok &= check(f"rot6[{j}]", d_rot6[j], plus, minus)

# focal via fov
from splatba.geometry import fov_to_focal_grad
d_fov = grads.d_focal * fov_to_focal_grad(K.fov_rad, W)
ok &= check("fov", d_fov,
            lambda: loss_for(gs, fov=K.fov_rad + h),
            lambda: loss_for(gs, fov=K.fov_rad - h))

print("ALL OK" if ok else "FAILURES PRESENT")
