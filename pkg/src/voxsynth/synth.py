"""Synthetic paired volumes for tests and end-to-end exercises.

Each phantom starts from a smooth "anatomy" field built from random
Gaussian blobs. The CT target maps that field through a monotone
intensity curve and, when the bone shell is enabled, overrides a band
around each blob with bright shell values, so a case has organ cores
(label 1) wrapped in bone-like shells (label 4). The source volume
renders the same anatomy with a different contrast (MR-like) or as a
shaded, noisy copy of the CT (cone-beam-like). The target is a
deterministic function of the noise-free field, so a translation
network can push L1 toward the input noise floor.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .volume import DatasetManifest, ManifestEntry, Volume, save_manifest, write_volume

ORGAN_THRESHOLD = 0.55
SHELL_LO = 0.30
SHELL_HI = 0.50
SOFT_CURVE = (
    (0.0, SHELL_LO, ORGAN_THRESHOLD, 1.0),
    (-980.0, -150.0, 80.0, 350.0),
)
SHELL_HU_LO = 1200.0
SHELL_HU_SPAN = 600.0

ORGAN_LABEL = 1
BONE_LABEL = 4


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    task: str = "mr2ct"
    n_blobs: int = 4
    noise: float = 0.05
    bone_shell: bool = True
    lesion: bool = False
    intensity_map: tuple = SOFT_CURVE
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("mr2ct", "cbct2ct"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_blobs < 1:
            raise ValueError("need at least one blob")
        xs, ys = self.intensity_map
        if len(xs) != len(ys) or len(xs) < 2:
            raise ValueError("intensity map needs matching knot sequences")
        if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) < 0):
            raise ValueError("intensity map must be monotone non-decreasing")


def _separable_blob(dims, center, sigmas, amplitude):
    axes = []
    for d, c, s in zip(dims, center, sigmas):
        u = np.arange(d, dtype=np.float64)
        axes.append(np.exp(-((u - c) ** 2) / (2.0 * s * s)))
    field = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return amplitude * field


def _anatomy_field(spec, rng):
    dims = spec.dims
    field = np.zeros(dims, dtype=np.float64)
    for _ in range(spec.n_blobs):
        center = [rng.uniform(0.25 * d, 0.75 * d) for d in dims]
        sigmas = [rng.uniform(0.10 * d, 0.22 * d) for d in dims]
        field += _separable_blob(dims, center, sigmas, rng.uniform(0.6, 1.0))
    if spec.lesion:
        center = [rng.uniform(0.30 * d, 0.70 * d) for d in dims]
        sigmas = [rng.uniform(0.04 * d, 0.08 * d) for d in dims]
        field += _separable_blob(dims, center, sigmas, rng.uniform(0.8, 1.0))
    return field / field.max()


def _render_ct(field, spec):
    xs, ys = spec.intensity_map
    hu = np.interp(field, xs, ys)
    shell = np.zeros(field.shape, dtype=bool)
    if spec.bone_shell:
        shell = (field >= SHELL_LO) & (field < SHELL_HI)
        t = (field[shell] - SHELL_LO) / (SHELL_HI - SHELL_LO)
        hu[shell] = SHELL_HU_LO + SHELL_HU_SPAN * t
    return np.clip(hu, -1024.0, 3071.0), shell


def _render_labels(field, shell):
    labels = np.zeros(field.shape, dtype=np.uint8)
    labels[field >= ORGAN_THRESHOLD] = ORGAN_LABEL
    labels[shell] = BONE_LABEL
    return labels


def _render_source(spec, field, shell, hu, rng):
    if spec.task == "mr2ct":
        src = 0.2 + 0.8 * np.power(field, 0.6)
        src[shell] *= 0.25
        src += rng.normal(0.0, spec.noise, size=field.shape)
        return src
    shade_c = [rng.uniform(0.3 * d, 0.7 * d) for d in field.shape]
    shade_s = [0.6 * d for d in field.shape]
    shade = _separable_blob(field.shape, shade_c, shade_s, rng.uniform(0.1, 0.2))
    src = (hu + 1024.0) * (1.0 - shade) - 1024.0
    src += rng.normal(0.0, 300.0 * spec.noise, size=field.shape)
    return np.clip(src, -1024.0, 3071.0)


def generate_pair(spec, seed=None):
    """One (source, target_ct, labels) triple of Volumes.

    The seed argument overrides spec.seed when given; either way the
    same inputs always produce bitwise-identical volumes.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
    field = _anatomy_field(spec, rng)
    hu, shell = _render_ct(field, spec)
    labels = _render_labels(field, shell)
    src = _render_source(spec, field, shell, hu, rng)

    def scalar(a):
        return Volume(a.astype(np.float32), spec.spacing_mm)

    return scalar(src), scalar(hu), Volume(labels, spec.spacing_mm)


def generate_dataset(out_dir, n_cases, spec=None, seed=0, lesion_fraction=0.0):
    """Write n_cases phantom triples plus a manifest.json; returns the manifest.

    The first round(lesion_fraction * n_cases) cases get an extra small
    high-contrast blob. Case seeds derive from the master seed, so the
    same call always produces byte-identical files.
    """
    spec = spec or PhantomSpec()
    if n_cases < 1:
        raise ValueError("need at least one case")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_lesion = int(round(lesion_fraction * n_cases))
    children = np.random.SeedSequence(seed).spawn(n_cases)
    src_tag = "mr" if spec.task == "mr2ct" else "cbct"
    entries = []
    for i, child in enumerate(children):
        case_seed = int(child.generate_state(1, np.uint64)[0])
        case_spec = replace(spec, lesion=i < n_lesion, seed=case_seed)
        src, ct, labels = generate_pair(case_spec)
        cid = f"case_{i:03d}"
        names = (f"{cid}_{src_tag}.vox", f"{cid}_ct.vox", f"{cid}_labels.vox")
        for name, vol in zip(names, (src, ct, labels)):
            write_volume(vol, out_dir / name)
        entries.append(ManifestEntry(
            case_id=cid, input_path=names[0], target_path=names[1],
            region="HN", label_path=names[2],
        ))
    manifest = DatasetManifest(task=spec.task, entries=entries, base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
