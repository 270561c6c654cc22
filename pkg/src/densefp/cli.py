"""Command-line pipeline: synth -> extract -> enroll -> search / eval.

Every command is deterministic given its config and inputs: rerunning with
the same arguments produces byte-identical outputs.  Partial failures list
the offending files on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import matching, metrics
from .descriptor import DenseDescriptor, deserialize_many, extract_descriptor, serialize_many
from .errors import DensefpError, PoseMissing, ProtocolError, SizeMismatch
from .image import load_image, save_image
from .pose import (
    Pose2D,
    align_to_canonical,
    downsample_half_half,
    estimate_pose_baseline,
    load_pose_file,
    rigid_transform,
    save_pose_file,
    transformed_pose,
)
from .synth import (
    DegradationRecipe,
    apply_elastic_distortion,
    degrade,
    generate_synthetic_fingerprint,
    load_recipe,
)

ALIGN_SIZE = 512
MIN_IMAGE_SIDE = 64
DESCRIPTOR_SUFFIX = ".fdd"

# Impression simulation ranges used by `synth --impressions`.
_IMPRESSION_SHIFT = 20.0
_IMPRESSION_ROTATION = 15.0
_IMPRESSION_ELASTIC = (1.0, 2.5)


@dataclass
class RunConfig:
    input_dir: Optional[str] = None
    output_dir: Optional[str] = None
    gallery_dir: Optional[str] = None
    descriptor_dir: Optional[str] = None
    pose_source: str = "baseline"  # baseline | file
    pose_file: Optional[str] = None
    variants: str = "clean"
    allow_pose_fallback: bool = False
    count: int = 0
    impressions: int = 1
    size: int = ALIGN_SIZE
    seed: int = 0
    jobs: int = 1
    top_k: int = 5
    protocol: Optional[str] = None
    output_csv: Optional[str] = None

    def __post_init__(self) -> None:
        if self.pose_source not in ("baseline", "file"):
            raise DensefpError(f"pose_source must be baseline or file, got {self.pose_source!r}")
        if not self.variant_specs():
            raise DensefpError("at least one variant is required")
        if self.jobs < 1:
            raise DensefpError("jobs must be >= 1")

    def variant_specs(self) -> List[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]


_CONFIG_BOOLS = {"allow_pose_fallback"}
_CONFIG_INTS = {"count", "impressions", "size", "seed", "jobs", "top_k"}


def load_config(path) -> Dict[str, object]:
    """Parse a line-based `key = value` config file; unknown keys rejected."""
    known = {f.name for f in fields(RunConfig)}
    out: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DensefpError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in known:
            raise DensefpError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in _CONFIG_BOOLS:
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif key in _CONFIG_INTS:
            out[key] = int(raw)
        else:
            out[key] = raw
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig) -> int:
    out_dir = Path(_require(cfg.output_dir, "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    poses: Dict[str, Pose2D] = {}
    manifest_rows: List[Tuple[str, str, int, int, float, float, float]] = []
    for finger in range(cfg.count):
        base, base_pose, _ = generate_synthetic_fingerprint(cfg.seed + finger, cfg.size)
        for imp in range(max(cfg.impressions, 1)):
            image_id = f"f{finger:04d}_i{imp}"
            if imp == 0:
                image, pose = base, base_pose
            else:
                rng = np.random.default_rng((cfg.seed + finger) * 1000 + imp)
                dx = float(rng.uniform(-_IMPRESSION_SHIFT, _IMPRESSION_SHIFT))
                dy = float(rng.uniform(-_IMPRESSION_SHIFT, _IMPRESSION_SHIFT))
                dtheta = float(rng.uniform(-_IMPRESSION_ROTATION, _IMPRESSION_ROTATION))
                magnitude = float(rng.uniform(*_IMPRESSION_ELASTIC))
                warp_seed = int(rng.integers(0, 2**31))
                image = rigid_transform(base, dx, dy, dtheta)
                image = apply_elastic_distortion(image, warp_seed, magnitude)
                pose = transformed_pose(base_pose, base.pixels.shape, dx, dy, dtheta)
            file_name = image_id + ".pgm"
            save_image(out_dir / file_name, image)
            poses[image_id] = pose
            manifest_rows.append(
                (image_id, file_name, finger, imp, pose.cx, pose.cy, pose.theta)
            )
    save_pose_file(out_dir / "poses.txt", poses)
    with open(out_dir / "manifest.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "file", "finger", "impression", "cx", "cy", "theta"])
        for row in manifest_rows:
            writer.writerow([row[0], row[1], row[2], row[3], f"{row[4]:.3f}", f"{row[5]:.3f}", f"{row[6]:.3f}"])
    print(f"wrote {len(manifest_rows)} images to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# extract


def _list_inputs(input_dir: Path) -> List[Tuple[str, Path]]:
    manifest = input_dir / "manifest.csv"
    if manifest.exists():
        rows = []
        with open(manifest, encoding="ascii", newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((rec["id"], input_dir / rec["file"]))
        return rows
    files = sorted(p for p in input_dir.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    return [(p.stem, p) for p in files]


def _resolve_variants(specs: Sequence[str]) -> List[Optional[DegradationRecipe]]:
    out: List[Optional[DegradationRecipe]] = []
    for spec in specs:
        if spec == "clean":
            out.append(None)
        else:
            out.append(load_recipe(spec))
    return out


def _extract_one(
    image_path: Path,
    pose: Pose2D,
    recipes: Sequence[Optional[DegradationRecipe]],
) -> bytes:
    image = load_image(image_path)
    if min(image.width, image.height) < MIN_IMAGE_SIDE:
        raise SizeMismatch(
            f"{image_path.name}: image {image.width}x{image.height} smaller than {MIN_IMAGE_SIDE} px"
        )
    aligned = downsample_half_half(align_to_canonical(image, pose, ALIGN_SIZE))
    variants: List[DenseDescriptor] = []
    for recipe in recipes:
        prepared = aligned if recipe is None else degrade(aligned, recipe)
        variants.append(extract_descriptor(prepared))
    return serialize_many(variants)


def cmd_extract(cfg: RunConfig) -> int:
    input_dir = Path(_require(cfg.input_dir, "input_dir"))
    out_dir = Path(_require(cfg.output_dir, "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    recipes = _resolve_variants(cfg.variant_specs())
    items = _list_inputs(input_dir)

    pose_table: Dict[str, Pose2D] = {}
    if cfg.pose_source == "file":
        pose_table = load_pose_file(_require(cfg.pose_file, "pose_file"))

    errors: List[str] = []
    fallbacks: List[str] = []

    def pose_for(image_id: str, path: Path) -> Pose2D:
        if cfg.pose_source == "file":
            if image_id in pose_table:
                return pose_table[image_id]
            if not cfg.allow_pose_fallback:
                raise PoseMissing(f"no pose entry for {image_id!r}")
            fallbacks.append(image_id)
        return estimate_pose_baseline(load_image(path))

    def work(item: Tuple[str, Path]) -> Tuple[str, Optional[bytes], Optional[str]]:
        image_id, path = item
        try:
            return image_id, _extract_one(path, pose_for(image_id, path), recipes), None
        except DensefpError as exc:
            return image_id, None, str(exc)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]

    for image_id, payload, error in results:  # manifest order regardless of pool
        if error is not None:
            errors.append(f"{image_id}: {error}")
            continue
        (out_dir / (image_id + DESCRIPTOR_SUFFIX)).write_bytes(payload)

    for image_id in fallbacks:
        print(f"warning: pose missing for {image_id}, used baseline estimate", file=sys.stderr)
    if errors:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    print(f"extracted {len(results)} descriptor files to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# enroll / search


def _load_descriptor_dir(dir_path: Path) -> List[Tuple[str, List[DenseDescriptor]]]:
    files = sorted(dir_path.glob("*" + DESCRIPTOR_SUFFIX))
    return [(p.stem, deserialize_many(p.read_bytes())) for p in files]


def _save_gallery(dir_path: Path, index: matching.GalleryIndex) -> None:
    dir_path.mkdir(parents=True, exist_ok=True)
    (dir_path / "ids.txt").write_text("".join(i + "\n" for i in index.ids), encoding="utf-8")
    (dir_path / "meta.txt").write_text(
        f"variants = {index.n_variants}\nchannels = {index.channels}\n"
        f"grid_h = {index.grid_shape[0]}\ngrid_w = {index.grid_shape[1]}\n",
        encoding="ascii",
    )
    for v in range(index.n_variants):
        np.save(dir_path / f"values_v{v}.npy", index.values[v])
        np.save(dir_path / f"cellnorms_v{v}.npy", index.cell_norms[v])
        np.save(dir_path / f"binmasks_v{v}.npy", index.bin_masks[v])


def _load_gallery(dir_path: Path) -> matching.GalleryIndex:
    ids = [l for l in (dir_path / "ids.txt").read_text(encoding="utf-8").splitlines() if l]
    meta = dict(
        line.split(" = ")
        for line in (dir_path / "meta.txt").read_text(encoding="ascii").splitlines()
        if line
    )
    n_variants = int(meta["variants"])
    values = [np.load(dir_path / f"values_v{v}.npy") for v in range(n_variants)]
    norms = [np.load(dir_path / f"cellnorms_v{v}.npy") for v in range(n_variants)]
    masks = [np.load(dir_path / f"binmasks_v{v}.npy") for v in range(n_variants)]
    return matching.GalleryIndex(
        ids, values, norms, masks,
        (int(meta["grid_h"]), int(meta["grid_w"])), int(meta["channels"]),
    )


def cmd_enroll(cfg: RunConfig) -> int:
    desc_dir = Path(_require(cfg.descriptor_dir, "descriptor_dir"))
    gallery_dir = Path(_require(cfg.gallery_dir, "gallery_dir"))
    entries = _load_descriptor_dir(desc_dir)
    index = matching.enroll(entries)
    _save_gallery(gallery_dir, index)
    print(f"enrolled {index.n_subjects} subjects x {index.n_variants} variants into {gallery_dir}")
    return 0


def cmd_search(cfg: RunConfig) -> int:
    desc_dir = Path(_require(cfg.descriptor_dir, "descriptor_dir"))
    gallery_dir = Path(_require(cfg.gallery_dir, "gallery_dir"))
    index = _load_gallery(gallery_dir)
    queries = _load_descriptor_dir(desc_dir)
    rows: List[Tuple[str, str, int, float, float]] = []
    for query_id, variants in queries:
        results = matching.search(variants, index, cfg.top_k) if index.n_subjects else []
        for res in results:
            print(
                f"{query_id}  ->  {res.gallery_id}  fused={res.fused_score:.6f}  "
                f"best_variant={res.best_variant}"
            )
            for v, score in enumerate(res.per_variant_scores):
                rows.append((query_id, res.gallery_id, v, score, res.fused_score))
    if cfg.output_csv:
        matching.write_scores_csv(cfg.output_csv, rows)
    return 0


# ---------------------------------------------------------------------------
# eval


def _parse_protocol(spec: str) -> Tuple[str, Tuple[int, ...]]:
    parts = spec.split(":")
    kind = parts[0]
    if kind == "fvc" and len(parts) == 3:
        return "fvc", (int(parts[1]), int(parts[2]))
    if kind == "cross" and len(parts) == 4:
        return "cross", (int(parts[1]), int(parts[2]), int(parts[3]))
    raise DensefpError(f"bad protocol spec {spec!r}; use fvc:F:I or cross:N:Q:G")


def _fused_pair_score(a: List[DenseDescriptor], b: List[DenseDescriptor]) -> float:
    per_variant = [matching.match_score(qa, qb) for qa, qb in zip(a, b)]
    return matching.fuse_scores(per_variant)[0]


def cmd_eval(cfg: RunConfig) -> int:
    desc_dir = Path(_require(cfg.descriptor_dir, "descriptor_dir"))
    out_dir = Path(_require(cfg.output_dir, "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    kind, dims = _parse_protocol(_require(cfg.protocol, "protocol"))

    # Impression naming: fvc uses one shared impression pool per finger;
    # cross keeps query and gallery acquisitions disjoint by offsetting
    # gallery samples past the Q query impressions.
    if kind == "fvc":
        protocol = metrics.build_fvc_protocol(*dims)
        gallery_offset = 0
    else:
        protocol = metrics.build_cross_protocol(*dims)
        gallery_offset = dims[1]
    query_id_of = lambda subject, sample: f"f{subject:04d}_i{sample}"  # noqa: E731
    gallery_id_of = lambda subject, sample: f"f{subject:04d}_i{sample + gallery_offset}"  # noqa: E731

    table = dict(_load_descriptor_dir(desc_dir))
    needed = set()
    for pairs in (protocol.genuine, protocol.impostor):
        for qs, qi, gs, gi in pairs:
            needed.add(query_id_of(qs, qi))
            needed.add(gallery_id_of(gs, gi))
    missing = sorted(i for i in needed if i not in table)
    if missing:
        raise ProtocolError("missing descriptors for: " + ", ".join(missing))

    genuine = np.array(
        [
            _fused_pair_score(table[query_id_of(qs, qi)], table[gallery_id_of(gs, gi)])
            for qs, qi, gs, gi in protocol.genuine
        ]
    )
    impostor = np.array(
        [
            _fused_pair_score(table[query_id_of(qs, qi)], table[gallery_id_of(gs, gi)])
            for qs, qi, gs, gi in protocol.impostor
        ]
    )
    scores = metrics.ScoreSet(genuine, impostor)

    # Closed-set identification: gallery sample 0 of each subject is
    # enrolled, every remaining query impression queries it.
    n_subjects = dims[0]
    gallery_ids = [gallery_id_of(s, 0) for s in range(n_subjects)]
    index = matching.enroll((gid, table[gid]) for gid in gallery_ids)
    query_rows = []
    true_idx = []
    for subject in range(n_subjects):
        sample = 0 if kind == "cross" else 1
        while query_id_of(subject, sample) in table:
            qid = query_id_of(subject, sample)
            if qid in gallery_ids:
                break
            results = matching.search(table[qid], index, top_k=n_subjects)
            row = np.zeros(n_subjects)
            for res in results:
                row[gallery_ids.index(res.gallery_id)] = res.fused_score
            query_rows.append(row)
            true_idx.append(subject)
            sample += 1
    cmc = metrics.cmc_curve(np.array(query_rows), true_idx) if query_rows else []

    det = metrics.det_curve(scores)
    metrics.write_det_csv(out_dir / "det.csv", det)
    metrics.write_cmc_csv(out_dir / "cmc.csv", cmc)
    metrics.write_summary_csv(
        out_dir / "summary.csv",
        {
            "rank1": cmc[0] if cmc else float("nan"),
            "tar@1e-3": metrics.tar_at_far(scores, 1e-3),
            "tar@1e-4": metrics.tar_at_far(scores, 1e-4),
            "eer": metrics.eer(scores),
            "n_genuine": protocol.n_genuine,
            "n_impostor": protocol.n_impostor,
        },
    )
    print(f"wrote det.csv, cmc.csv, summary.csv to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _require(value, name: str):
    if value in (None, ""):
        raise DensefpError(f"missing required option: {name}")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densefp", description=__doc__)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="global RNG seed")
    parser.add_argument("--jobs", type=int, help="worker threads for per-image stages")
    # The same globals are accepted after the subcommand; SUPPRESS keeps an
    # absent trailing flag from clobbering one given before the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic prints + ground-truth poses")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--count", type=int)
    p.add_argument("--impressions", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("extract", parents=[common], help="align, downsample and extract descriptors")
    p.add_argument("--in", dest="input_dir")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--pose-source", dest="pose_source", choices=["baseline", "file"])
    p.add_argument("--pose-file", dest="pose_file")
    p.add_argument("--variants")
    p.add_argument("--allow-pose-fallback", dest="allow_pose_fallback", action="store_true", default=None)

    p = sub.add_parser("enroll", parents=[common], help="build a gallery index from descriptor files")
    p.add_argument("--descriptors", dest="descriptor_dir")
    p.add_argument("--gallery", dest="gallery_dir")

    p = sub.add_parser("search", parents=[common], help="rank the gallery for each query descriptor")
    p.add_argument("--descriptors", dest="descriptor_dir")
    p.add_argument("--gallery", dest="gallery_dir")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--out", dest="output_csv")

    p = sub.add_parser("eval", parents=[common], help="protocol scoring and DET/CMC/summary CSVs")
    p.add_argument("--descriptors", dest="descriptor_dir")
    p.add_argument("--protocol")
    p.add_argument("--out", dest="output_dir")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "enroll": cmd_enroll,
    "search": cmd_search,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = vars(_build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        overrides = {}
        if config_path:
            overrides.update(load_config(config_path))
        overrides.update({k: v for k, v in args.items() if v is not None})
        cfg = RunConfig(**overrides)
        return _COMMANDS[command](cfg)
    except DensefpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
