"""Command-line entry points: reconstruct, invert, render-turntable,
extract-mesh, evaluate.

Exit codes: 0 success, 1 configuration error, 2 provider error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import evalgeo, images, inversion, scenes
from .field import FieldConfig
from .losses import LossWeights
from .prior import (
    GaussianPriorProvider,
    OracleViewProvider,
    ProviderError,
    RemoteScoreProvider,
    make_schedule,
)
from .render import ShadingSpec, camera_from_spherical, render_view
from .trainer import TrainConfig, TrainInputs, load_checkpoint, train

REMOTE_URL_ENV = "SOLOFIELD_REMOTE_URL"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROVIDER = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


class NumericError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument plumbing

_CONFIG_SKIP = {"weights", "field"}


def _flag(name: str, prefix: str = "") -> str:
    return "--" + (prefix + name).replace("_", "-")


def _add_dataclass_args(parser, cls, prefix: str = ""):
    for f in dataclasses.fields(cls):
        if f.name in _CONFIG_SKIP:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            parser.add_argument(_flag(f.name, prefix), dest=prefix + f.name,
                                action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, (int, float, str, tuple)) or default is None:
            parser.add_argument(_flag(f.name, prefix), dest=prefix + f.name,
                                type=str, default=None)


def add_train_config_args(parser):
    _add_dataclass_args(parser, TrainConfig)
    _add_dataclass_args(parser, LossWeights, prefix="weights.")
    _add_dataclass_args(parser, FieldConfig, prefix="field.")


def _coerce(value: str, template):
    if isinstance(template, bool):
        return value in ("1", "true", "True", "yes")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        parts = [p for p in value.split(",") if p]
        return tuple(type(t)(p) for t, p in zip(template, parts)) if template \
            else tuple(float(p) for p in parts)
    return value


def train_config_from_args(args) -> TrainConfig:
    cfg = TrainConfig()
    values = vars(args)
    for f in dataclasses.fields(TrainConfig):
        if f.name in _CONFIG_SKIP:
            continue
        v = values.get(f.name)
        if v is None:
            continue
        template = getattr(cfg, f.name)
        if f.name == "switch_step":
            setattr(cfg, f.name, int(v))
        else:
            setattr(cfg, f.name, _coerce(v, template) if template is not None else v)
    for obj, prefix in ((cfg.weights, "weights."), (cfg.field, "field.")):
        for f in dataclasses.fields(obj):
            v = values.get(prefix + f.name)
            if v is None:
                continue
            setattr(obj, f.name, _coerce(v, getattr(obj, f.name)))
    cfg.__post_init__()
    cfg.weights.__post_init__()
    cfg.field.validate()
    return cfg


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _prepare_out_dir(path, overwrite: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {p} is not empty (use --overwrite)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _prepare_out_file(path, overwrite: bool) -> Path:
    p = Path(path)
    if p.exists() and not overwrite:
        raise ConfigError(f"output file {p} exists (use --overwrite)")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _resolve_remote_url(spec_url: str) -> str:
    return os.environ.get(REMOTE_URL_ENV, spec_url)


def _build_provider(spec: str, cfg: TrainConfig):
    """Provider spec: gaussian | oracle:<scene> | remote:<url>.

    For oracle scenes the prior-camera distribution is pinned to the stored
    rig (reference distance/fov, no near-reference jitter, guidance 1) unless
    the user overrides those flags explicitly.
    """
    if spec == "gaussian":
        return GaussianPriorProvider(), None
    if spec.startswith("oracle:"):
        name = spec.split(":", 1)[1]
        if name != "sphere":
            raise ConfigError(f"unknown oracle scene {name!r}")
        scene = scenes.SphereScene()
        views = scenes.stored_views(scene, distance=cfg.ref_distance,
                                    fov=cfg.ref_fov, res=cfg.render_res)
        return OracleViewProvider(views), scene
    if spec.startswith("remote:") or spec == "remote":
        url = _resolve_remote_url(spec.split(":", 1)[1] if ":" in spec else "")
        if not url:
            raise ConfigError("remote provider needs a URL "
                              f"(remote:<url> or ${REMOTE_URL_ENV})")
        return RemoteScoreProvider(url), None
    raise ConfigError(f"unknown provider spec {spec!r}")


def _pin_oracle_defaults(args, cfg: TrainConfig) -> None:
    if args.prior_distance is None:
        cfg.prior_distance = (cfg.ref_distance, cfg.ref_distance)
    if args.fov_range is None:
        cfg.fov_range = (cfg.ref_fov, cfg.ref_fov)
    if args.near_ref_every is None:
        cfg.near_ref_every = 0
    if args.guidance is None:
        cfg.guidance = 1.0


# ---------------------------------------------------------------------------
# commands

def cmd_reconstruct(args) -> int:
    cfg = train_config_from_args(args)
    out_dir = _prepare_out_dir(args.out, args.overwrite)
    image = images.load_image(_require_file(args.image, "input image"))
    mask = images.load_mask(_require_file(args.mask, "mask"))
    res = cfg.render_res
    if image.shape[:2] != (res, res):
        image = images.bilinear_resize(image, res, res)
    if mask.shape != (res, res):
        mask = (images.bilinear_resize(mask, res, res) >= 0.5).astype(float)

    provider, scene = _build_provider(args.provider, cfg)
    if scene is not None:
        _pin_oracle_defaults(args, cfg)

    schedule = make_schedule()
    embedding = None
    token_id = None
    if args.embedding is not None:
        embedding = inversion.load_embedding(_require_file(args.embedding, "embedding"))
    elif isinstance(provider, RemoteScoreProvider):
        token_id, _ = provider.invert_token(image, steps=args.invert_steps,
                                            lr=args.invert_lr, batch=args.invert_batch,
                                            seed=cfg.seed)
    elif isinstance(provider, GaussianPriorProvider) and not args.skip_inversion:
        spec = inversion.AugmentationSpec(out_size=res)
        embedding, _ = inversion.invert_embedding(
            provider, image, spec, steps=args.invert_steps, lr=args.invert_lr,
            batch=args.invert_batch, schedule=schedule, seed=cfg.seed)
        inversion.save_embedding(embedding, out_dir / "embedding.bin")

    inputs = TrainInputs(image=image, mask=mask, embedding=embedding,
                         token_id=token_id)
    result = train(inputs, cfg, provider, schedule=schedule, out_dir=out_dir)

    for row in result.history[-5:]:
        if not all(np.isfinite(v) for k, v in row.items() if k != "step"):
            raise NumericError("non-finite losses at the end of training")

    _write_turntable(result.model, result.bg, out_dir / "turntable", frames=8,
                     elevation=cfg.ref_elevation, distance=cfg.ref_distance,
                     fov=cfg.ref_fov, res=res, n_samples=cfg.n_samples)

    mesh = evalgeo.marching_cubes(result.model, args.mesh_res, args.iso)
    if not mesh.is_empty:
        evalgeo.save_obj(mesh, out_dir / "mesh.obj")
        evalgeo.save_ply_mesh(mesh, out_dir / "mesh.ply")

    gt_points = None
    if args.gt_points is not None:
        gt_points = evalgeo.load_ply_points(_require_file(args.gt_points, "GT cloud")).points
    elif scene is not None:
        gt_points = scene.surface_points(10_000, np.random.default_rng(cfg.seed))
    if gt_points is not None and not mesh.is_empty:
        pred = evalgeo.sample_mesh_points(mesh, 10_000,
                                          np.random.default_rng(cfg.seed + 1)).points
        metrics, _ = evalgeo.align_and_score(pred, gt_points, tau=args.tau)
        evalgeo.write_metrics(metrics, out_dir / "metrics.json")
        print(f"fscore={metrics['fscore']:.4f} precision={metrics['precision']:.4f} "
              f"recall={metrics['recall']:.4f}")
    return EXIT_OK


def cmd_invert(args) -> int:
    out = _prepare_out_file(args.out, args.overwrite)
    image = images.load_image(_require_file(args.image, "input image"))
    if args.provider.startswith("remote") or args.provider == "remote":
        url = _resolve_remote_url(args.provider.split(":", 1)[1]
                                  if ":" in args.provider else "")
        if not url:
            raise ConfigError("remote inversion needs a URL")
        provider = RemoteScoreProvider(url)
        token_id, embedding = provider.invert_token(
            image, steps=args.steps, lr=args.lr, batch=args.batch, seed=args.seed)
        inversion.save_embedding(embedding, out)
        print(f"token_id={token_id}")
        return EXIT_OK
    if args.provider != "gaussian":
        raise ConfigError(f"unsupported inversion provider {args.provider!r}")
    provider = GaussianPriorProvider(embedding_dim=args.dim)

    init = None
    rng = np.random.default_rng(args.seed)
    if args.init == "random":
        init = inversion.init_embedding("random", dim=args.dim, rng=rng)
    elif args.init.startswith("manual:"):
        vocab = inversion.load_vocabulary(
            _require_file(args.vocab, "vocabulary"), dim=args.dim)
        init = inversion.init_embedding("manual", vocab=vocab,
                                        token=args.init.split(":", 1)[1])
    elif args.init.startswith("nearest:"):
        vocab = inversion.load_vocabulary(
            _require_file(args.vocab, "vocabulary"), dim=args.dim)
        anchor = inversion.load_embedding(
            _require_file(args.init.split(":", 1)[1], "image embedding"))
        init = inversion.init_embedding("nearest", vocab=vocab, image_embedding=anchor)
    elif args.init != "zeros":
        raise ConfigError(f"unknown init mode {args.init!r}")

    spec = inversion.AugmentationSpec(out_size=args.aug_size)
    embedding, history = inversion.invert_embedding(
        provider, image, spec, steps=args.steps, lr=args.lr, batch=args.batch,
        schedule=make_schedule(), seed=args.seed, init=init,
        weight_decay=args.weight_decay)
    inversion.save_embedding(embedding, out)
    if history:
        print(f"final objective {history[-1]:.6f}")
    return EXIT_OK


def _write_turntable(model, bg, out_dir: Path, frames: int, elevation: float,
                     distance: float, fov: float, res: int, n_samples: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(frames):
        azimuth = 360.0 * k / frames
        cam = camera_from_spherical(distance, azimuth, elevation, fov, res, res)
        out = render_view(model, cam, bg=bg, n_samples=n_samples, stratified=False)
        images.save_png(out_dir / f"frame_{k:03d}.png", out.rgb)
        shaded_spec = ShadingSpec(mode="textureless", light_position=cam.position,
                                  light_color=0.9, ambient=0.1)
        shaded = render_view(model, cam, spec=shaded_spec, bg=bg,
                             n_samples=n_samples, stratified=False)
        images.save_png(out_dir / f"frame_{k:03d}_shaded.png", shaded.rgb)
        images.save_png(out_dir / f"frame_{k:03d}_opacity.png", out.opacity)
        images.save_png(out_dir / f"frame_{k:03d}_normals.png",
                        images.encode_normal_map(out.normals))


def cmd_render(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "field.ckpt").is_file():
        raise ConfigError(f"checkpoint directory {ckpt} lacks field.ckpt")
    out_dir = _prepare_out_dir(args.out, args.overwrite)
    model, bg, _, _ = load_checkpoint(ckpt)
    _write_turntable(model, bg, out_dir, frames=args.frames,
                     elevation=args.elevation, distance=args.distance,
                     fov=args.fov, res=args.res, n_samples=args.n_samples)
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "field.ckpt").is_file():
        raise ConfigError(f"checkpoint directory {ckpt} lacks field.ckpt")
    out = _prepare_out_file(args.out, args.overwrite)
    model, _, _, _ = load_checkpoint(ckpt)
    mesh = evalgeo.marching_cubes(model, args.grid_res, args.iso)
    if mesh.is_empty:
        print("empty isosurface", file=sys.stderr)
    if str(out).endswith(".obj"):
        evalgeo.save_obj(mesh, out)
    else:
        evalgeo.save_ply_mesh(mesh, out)
    print(f"vertices={len(mesh.vertices)} faces={len(mesh.faces)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gt = evalgeo.load_ply_points(_require_file(args.gt, "GT cloud")).points
    rng = np.random.default_rng(args.seed)
    if args.mesh is not None:
        cloud = evalgeo.sample_mesh_points(
            _load_mesh(_require_file(args.mesh, "mesh")), args.samples, rng).points
    else:
        ckpt = Path(args.checkpoint)
        if not (ckpt / "field.ckpt").is_file():
            raise ConfigError(f"checkpoint directory {ckpt} lacks field.ckpt")
        model, _, _, _ = load_checkpoint(ckpt)
        mesh = evalgeo.marching_cubes(model, args.grid_res, args.iso)
        if mesh.is_empty:
            raise NumericError("empty isosurface; nothing to evaluate")
        cloud = evalgeo.sample_mesh_points(mesh, args.samples, rng).points
    metrics, _ = evalgeo.align_and_score(cloud, gt, tau=args.tau)
    if args.out is not None:
        evalgeo.write_metrics(metrics, _prepare_out_file(args.out, args.overwrite))
    print(f"fscore={metrics['fscore']:.4f} precision={metrics['precision']:.4f} "
          f"recall={metrics['recall']:.4f} tau={args.tau}")
    return EXIT_OK


def _load_mesh(path: Path) -> evalgeo.Mesh:
    if str(path).endswith(".obj"):
        verts, faces = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return evalgeo.Mesh(vertices=np.array(verts), faces=np.array(faces, dtype=int))
    raise ConfigError("only .obj meshes are supported for --mesh")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="solofield",
        description="Single-image 3D reconstruction with a score-distillation prior")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="optimize a field from one image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--provider", default="gaussian",
                   help="gaussian | oracle:sphere | remote:<url>")
    p.add_argument("--embedding", default=None, help="precomputed embedding file")
    p.add_argument("--skip-inversion", action="store_true")
    p.add_argument("--invert-steps", type=int, default=3000)
    p.add_argument("--invert-lr", type=float, default=5e-4)
    p.add_argument("--invert-batch", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--gt-points", default=None, help="PLY cloud for metrics")
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--mesh-res", type=int, default=96)
    p.add_argument("--iso", type=float, default=10.0)
    add_train_config_args(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("invert", help="optimize a conditioning embedding")
    p.add_argument("--image", required=True)
    p.add_argument("--provider", default="gaussian")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--aug-size", type=int, default=64)
    p.add_argument("--init", default="zeros",
                   help="zeros | random | manual:<token> | nearest:<emb file>")
    p.add_argument("--vocab", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("render-turntable", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--elevation", type=float, default=15.0)
    p.add_argument("--distance", type=float, default=1.8)
    p.add_argument("--fov", type=float, default=40.0)
    p.add_argument("--res", type=int, default=96)
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("extract-mesh", help="marching cubes over a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid-res", type=int, default=96)
    p.add_argument("--iso", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("evaluate", help="F-score of a mesh/checkpoint vs a GT cloud")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--grid-res", type=int, default=96)
    p.add_argument("--iso", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        if getattr(args, "command", None) == "evaluate" \
                and args.mesh is None and args.checkpoint is None:
            raise ConfigError("evaluate needs --checkpoint or --mesh")
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
