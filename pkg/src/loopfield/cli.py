"""Command-line surface: check plus the five pipeline stages.

Exit codes: 0 on success, 2 for configuration problems, 3 when a stage
fails. LOOPFIELD_THREADS caps internal parallelism (it is exported to
the BLAS thread-count variables before numpy loads).
"""

import os
import sys


def _apply_thread_cap():
    v = os.environ.get("LOOPFIELD_THREADS")
    if not v:
        return
    try:
        n = max(int(v), 1)
    except ValueError:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


_apply_thread_cap()

import argparse  # noqa: E402
import json  # noqa: E402

from .pipeline import (  # noqa: E402
    ConfigError,
    Pipeline,
    PipelineConfig,
    StageFailure,
    check_report,
)

_COMMANDS = ("check", "features", "cluster", "field", "animate", "render",
             "pipeline")


def _parse_resolution(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError("resolution must look like 900x900")


def _parse_vec3(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return tuple(float(p) for p in parts)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="loopfield",
        description="Looping 3D cinemagraphs from Gaussian-splat point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--input-ply", dest="input_ply")
        p.add_argument("--mask", dest="mask_path")
        p.add_argument("--cameras", dest="cameras_path")
        p.add_argument("--out", dest="output_dir")
        p.add_argument("--lambda", dest="lambda_res", type=float,
                       help="voxel resolution factor (R = lambda * max bbox side)")
        p.add_argument("--mu", type=float, help="position weight in the cluster metric")
        p.add_argument("--omega", type=float, help="motion amplitude")
        p.add_argument("--frames", type=int, help="loop length T")
        p.add_argument("--feature-backend", dest="feature_backend",
                       choices=("autoencoder", "handcrafted"))
        p.add_argument("--feature-dim", dest="feature_dim", type=int)
        p.add_argument("--pe-frequencies", dest="pe_frequencies", type=int)
        p.add_argument("--variogram-bins", dest="variogram_bins", type=int)
        p.add_argument("--knn-k", dest="knn_k", type=int)
        p.add_argument("--cluster-iterations", dest="cluster_iterations", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--autoencoder-epochs", dest="autoencoder_epochs", type=int)
        p.add_argument("--field-epochs", dest="field_epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--sh-degree-render", dest="sh_degree_render", type=int)
        p.add_argument("--resolution", type=_parse_resolution,
                       help="render size, e.g. 900x900")
        p.add_argument("--psi-override", dest="psi_override", type=_parse_vec3,
                       help="bypass the amplitude rule with an explicit psi vector")
        p.add_argument("--seed-features", dest="seed_features", type=int)
        p.add_argument("--seed-cluster", dest="seed_cluster", type=int)
        p.add_argument("--seed-field", dest="seed_field", type=int)
    return parser


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for name in ("input_ply", "mask_path", "cameras_path", "output_dir",
                 "lambda_res", "mu", "omega", "frames", "feature_backend",
                 "feature_dim", "pe_frequencies", "variogram_bins", "knn_k",
                 "cluster_iterations", "learning_rate", "autoencoder_epochs",
                 "field_epochs", "batch_size", "sh_degree_render",
                 "resolution", "psi_override"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    for seed_name in ("features", "cluster", "field"):
        value = getattr(args, f"seed_{seed_name}", None)
        if value is not None:
            cfg.seeds[seed_name] = value
    return cfg.validate()


def _print_check(report, cfg):
    print(f"points:            {report['points']}")
    h = ", ".join(f"{v:.6g}" for v in report["bbox_h"])
    print(f"bbox h:            [{h}]")
    print(f"eccentricity loss: {report['eccentricity_loss']:.6g}")
    print(f"mask coverage:     {100.0 * report['mask_coverage']:.2f}%")
    print(f"voxel resolution:  {report['voxel_resolution']:.6g} "
          f"(lambda={cfg.lambda_res:g})")
    print(f"non-empty voxels:  {report['non_empty_voxels']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        if args.command == "check":
            _print_check(check_report(cfg), cfg)
        elif args.command == "pipeline":
            Pipeline(cfg).run_all()
        else:
            Pipeline(cfg).run_stage(args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
