import logging
import os
import sys
import warnings

import click

from vesicle.exceptions import ParameterError
from vesicle.lib.enums import MaskProvenance, VoxelType
from vesicle.lib.files import read_json, read_png_stack, write_json
from vesicle.lib.schemas import RUN_CONFIG_SCHEMA
from vesicle.utils import (
    CliLogFormatter,
    OPTION_HELP,
    default_workers,
    parse_list,
    parse_pair,
    parse_triple,
    pretty_errors,
)
from vesicle.version import __version__


# set the context for getting -h also
CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"])
log = logging.getLogger("vesicle")


def warning_msg(message, category, filename, lineno, file=None, line=None):
    log.warning(message)


warnings.showwarning = warning_msg


class VesicleGroup(click.Group):
    """Click group whose usage errors exit with 1; data errors exit with 2 via `pretty_errors`."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            return super(VesicleGroup, self).main(
                args, prog_name, complete_var, standalone_mode=False, **extra
            )
        except click.UsageError as e:
            e.show()
            sys.exit(1)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)


def write_run_record(ctx, output):
    """Write `run.json` next to `output` (inside it, when it is a directory)."""
    directory = output if os.path.isdir(output) else os.path.dirname(os.path.abspath(output))
    params = {k: list(v) if isinstance(v, tuple) else v for k, v in ctx.params.items()}
    write_json(
        os.path.join(directory, "run.json"),
        {
            "tool": "vesicle",
            "version": __version__,
            "subcommand": ctx.info_name,
            "params": params,
        },
    )


# shared option groups
def _apply(options):
    def decorator(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return decorator


membrane_options = _apply(
    [
        click.option("--membrane", type=click.Path(exists=True, dir_okay=False),
                     help=OPTION_HELP["membrane"]),
        click.option("--membrane-threshold", default=0.5, show_default=True,
                     help=OPTION_HELP["membrane_threshold"]),
        click.option("--membrane-band", callback=parse_pair, metavar="LO,HI",
                     help=OPTION_HELP["membrane_band"]),
        click.option("--band-reference", type=click.Path(exists=True, dir_okay=False),
                     help=OPTION_HELP["band_reference"]),
    ]
)

vesicle_options = _apply(
    [
        click.option("--vesicles", "vesicles_path", type=click.Path(exists=True, dir_okay=False),
                     help=OPTION_HELP["vesicles"]),
        click.option("--vesicle-threshold", default=0.6, show_default=True,
                     help=OPTION_HELP["vesicle_threshold"]),
        click.option("--nms-radius", default=5.0, show_default=True, help=OPTION_HELP["nms_radius"]),
        click.option("--cluster-radius", default=500.0, show_default=True,
                     help=OPTION_HELP["cluster_radius"]),
        click.option("--cluster-min", default=4, show_default=True, help=OPTION_HELP["cluster_min"]),
        click.option("--template-radius", default=3.0, show_default=True,
                     help=OPTION_HELP["template_radius"]),
        click.option("--template-thickness", default=2.0, show_default=True,
                     help=OPTION_HELP["template_thickness"]),
        click.option("--template-side", default=11, show_default=True,
                     help=OPTION_HELP["template_side"]),
        click.option("--exemplars", type=click.Path(exists=True, dir_okay=False),
                     help=OPTION_HELP["exemplars"]),
    ]
)

fusion_options = _apply(
    [
        click.option("--threshold", default=0.5, show_default=True, help=OPTION_HELP["threshold"]),
        click.option("--min2d", default=0, show_default=True, help=OPTION_HELP["min2d"]),
        click.option("--max2d", default=10000, show_default=True, help=OPTION_HELP["max2d"]),
        click.option("--min3d", default=100, show_default=True, help=OPTION_HELP["min3d"]),
        click.option("--persistence", default=1, show_default=True,
                     help=OPTION_HELP["persistence"]),
        click.option("--connectivity2d", default="8", type=click.Choice(["4", "8"]),
                     show_default=True, help=OPTION_HELP["connectivity2d"]),
        click.option("--connectivity3d", default="26", type=click.Choice(["6", "18", "26"]),
                     show_default=True, help=OPTION_HELP["connectivity3d"]),
    ]
)


def _load_em(path):
    from vesicle.volume import load_volume

    em = load_volume(path)
    if em.voxel_type != VoxelType.U8:
        raise ParameterError("{}: EM volumes must be u8, got {}".format(path, em.voxel_type.value))
    return em


def _load_labels(path):
    """A u32 label grid from a label volume or an object manifest."""
    from vesicle.fusion import ObjectSet
    from vesicle.volume import load_volume

    if path.endswith(".json"):
        return ObjectSet.load(path).label_grid()
    labels = load_volume(path)
    if labels.voxel_type != VoxelType.U32:
        raise ParameterError("{}: label volumes must be u32".format(path))
    return labels


def _membrane_mask(em, membrane, membrane_threshold, membrane_band, band_reference):
    from vesicle.volume import (
        MembraneMask,
        intensity_bandpass_mask,
        label_intensities,
        load_volume,
        membrane_mask_from_probability,
    )

    if membrane and membrane_band:
        raise ParameterError("Pass either --membrane or --membrane-band, not both")

    if membrane:
        grid = load_volume(membrane)
        em.check_aligned(grid, what="EM volume and membrane")
        if grid.voxel_type == VoxelType.F32:
            return membrane_mask_from_probability(grid, membrane_threshold)
        return MembraneMask(grid, MaskProvenance.ExternalProbability)

    if membrane_band:
        reference = None
        if band_reference:
            reference = label_intensities(em, _load_labels(band_reference))
        lo, hi = membrane_band
        return intensity_bandpass_mask(em, lo, hi, reference)

    log.info("No membrane source given; every voxel is scored")
    return MembraneMask.full(em)


def _template(em, exemplars, template_radius, template_thickness, template_side):
    from vesicle.vesicles import build_template, extract_exemplars, load_vesicles

    if exemplars:
        patches = extract_exemplars(em, load_vesicles(exemplars), template_side)
        return build_template(exemplars=patches)
    return build_template(radius=template_radius, thickness=template_thickness, side=template_side)


def _vesicle_params(vesicle_threshold, nms_radius, cluster_radius, cluster_min):
    from vesicle.vesicles import VesicleParams

    return VesicleParams(vesicle_threshold, nms_radius, cluster_radius, cluster_min)


def _vesicles(ctx, em, vesicles_path, **kwargs):
    """Load vesicles from a file, or detect them in `em`."""
    from vesicle.vesicles import detect_vesicles, load_vesicles, matched_response

    if vesicles_path:
        return load_vesicles(vesicles_path)

    template = _template(
        em,
        kwargs["exemplars"],
        kwargs["template_radius"],
        kwargs["template_thickness"],
        kwargs["template_side"],
    )
    vp = _vesicle_params(
        kwargs["vesicle_threshold"],
        kwargs["nms_radius"],
        kwargs["cluster_radius"],
        kwargs["cluster_min"],
    )
    found = detect_vesicles(
        matched_response(em, template, ctx.obj["WORKERS"]),
        vp.threshold,
        vp.nms_radius_px,
        vp.cluster_radius_nm,
        vp.cluster_min,
    )
    log.info("Detected %i vesicles", len(found))
    return found


def _fusion_params(threshold, min2d, max2d, min3d, persistence, connectivity2d, connectivity3d):
    from vesicle.fusion import FusionParams

    return FusionParams(
        threshold, min2d, max2d, min3d, persistence, int(connectivity2d), int(connectivity3d)
    )


# options
@click.group(cls=VesicleGroup, context_settings=CONTEXT_SETTINGS)
@click.option("--verbose", "-v", is_flag=True, help=OPTION_HELP["verbose"])
@click.option("--workers", type=int, envvar="VESICLE_WORKERS", help=OPTION_HELP["workers"])
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help=OPTION_HELP["config"])
@click.version_option(version=__version__)
@click.pass_context
@pretty_errors
def vesicle(ctx, verbose, workers, config):
    """Synapse detection in anisotropic electron microscopy volumes."""
    log_formatter = CliLogFormatter()
    log.setLevel(logging.INFO)
    log.handlers[0].setFormatter(log_formatter)

    if verbose:
        log.setLevel(logging.DEBUG)

    if workers is not None and workers < 1:
        raise ParameterError("--workers must be >= 1, got {}".format(workers))

    ctx.obj = {"WORKERS": workers or default_workers()}

    if config:
        record = read_json(config, RUN_CONFIG_SCHEMA)
        ctx.default_map = {record["subcommand"]: record["params"]}
        log.debug("Using %s defaults from %s", record["subcommand"], config)


@vesicle.command("synth")
@click.option("--dims", default="128,128,40", callback=parse_triple(int), help=OPTION_HELP["dims"])
@click.option("--resolution", default="6,6,30", callback=parse_triple(float),
              help=OPTION_HELP["resolution"])
@click.option("--density", default=0.5, show_default=True, help=OPTION_HELP["density"])
@click.option("--cluster-rate", default=7.0, show_default=True, help=OPTION_HELP["cluster_rate"])
@click.option("--noise", default=8.0, show_default=True, help=OPTION_HELP["noise"])
@click.option("--vesicle-radius", default=4, show_default=True, help=OPTION_HELP["vesicle_radius"])
@click.option("--seed", default=0, show_default=True, help=OPTION_HELP["seed"])
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
@pretty_errors
def synth(ctx, dims, resolution, density, cluster_rate, noise, vesicle_radius, seed, out):
    """Generate a synthetic phantom with known synapses and vesicles."""
    from vesicle.synth import PhantomSpec, generate_phantom

    spec = PhantomSpec(dims, resolution, density, cluster_rate, noise, seed, vesicle_radius)
    phantom = generate_phantom(spec)
    phantom.save(out)
    write_run_record(ctx, out)
    click.echo("{} synapses, {} vesicles written to {}".format(
        len(phantom.truth), len(phantom.vesicle_truth), out
    ), err=True)


@vesicle.command("vesicles")
@click.option("--em", required=True, type=click.Path(exists=True, dir_okay=False),
              help="EM volume (u8 VSV1)")
@vesicle_options
@click.option("--truth", type=click.Path(exists=True, dir_okay=False),
              help="True vesicle centroids to score the detections against")
@click.option("--match-radius", default=3.0, show_default=True, help=OPTION_HELP["match_radius"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Vesicle file to write")
@click.pass_context
@pretty_errors
def vesicles_cmd(ctx, em, vesicles_path, truth, match_radius, out, **kwargs):
    """Detect vesicle centroids by matched filtering."""
    from vesicle.vesicles import load_vesicles, match_vesicles, save_vesicles

    grid = _load_em(em)
    found = _vesicles(ctx, grid, vesicles_path, **kwargs)
    save_vesicles(
        found,
        out,
        _vesicle_params(
            kwargs["vesicle_threshold"],
            kwargs["nms_radius"],
            kwargs["cluster_radius"],
            kwargs["cluster_min"],
        ).to_dict(),
    )
    write_run_record(ctx, out)

    if truth:
        m = match_vesicles(found, load_vesicles(truth), match_radius)
        click.echo(
            "tp={} fp={} fn={} precision={:.4f} recall={:.4f}".format(
                m.tp, m.fp, m.fn, m.precision, m.recall
            )
        )


@vesicle.command("train")
@click.option("--em", required=True, type=click.Path(exists=True, dir_okay=False),
              help="EM volume (u8 VSV1)")
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Synapse labels (u32 VSV1 or object manifest)")
@membrane_options
@vesicle_options
@click.option("--no-vesicle-features", is_flag=True, help=OPTION_HELP["no_vesicle_features"])
@click.option("--n-samples", default=200000, show_default=True, help=OPTION_HELP["n_samples"])
@click.option("--n-trees", default=128, show_default=True, help=OPTION_HELP["n_trees"])
@click.option("--mtry", default=3, show_default=True, help=OPTION_HELP["mtry"])
@click.option("--min-leaf", default=5, show_default=True, help=OPTION_HELP["min_leaf"])
@click.option("--max-depth", default=40, show_default=True, help=OPTION_HELP["max_depth"])
@click.option("--seed", default=0, show_default=True, help=OPTION_HELP["seed"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model file to write")
@click.pass_context
@pretty_errors
def train_cmd(
    ctx,
    em,
    labels,
    membrane,
    membrane_threshold,
    membrane_band,
    band_reference,
    vesicles_path,
    no_vesicle_features,
    n_samples,
    n_trees,
    mtry,
    min_leaf,
    max_depth,
    seed,
    out,
    **kwargs
):
    """Train the synapse random forest on labelled EM."""
    from vesicle.features import assemble_features
    from vesicle.forest import ForestParams, sample_training, save_model, train
    from vesicle.lib.enums import Channel
    from vesicle.vesicles import VesicleSet

    workers = ctx.obj["WORKERS"]
    params = ForestParams(n_trees, mtry, min_leaf, max_depth, seed)
    grid = _load_em(em)
    label_grid = _load_labels(labels)
    grid.check_aligned(label_grid, what="EM volume and labels")
    mask = _membrane_mask(grid, membrane, membrane_threshold, membrane_band, band_reference)

    if no_vesicle_features:
        found = VesicleSet.empty()
    else:
        found = _vesicles(ctx, grid, vesicles_path, **kwargs)

    stack = assemble_features(grid, found, use_vesicles=not no_vesicle_features, workers=workers)
    ts = sample_training(stack, label_grid, mask, n_samples, seed)
    model = train(ts, params, workers)
    save_model(model, out)
    write_run_record(ctx, out)

    counts = model.split_counts()
    for channel, count in zip(Channel, counts):
        log.debug("%s: %i splits", channel.value, count)
    if model.oob_accuracy is not None:
        click.echo("out-of-bag accuracy {:.4f}".format(model.oob_accuracy), err=True)


@vesicle.command("detect")
@click.option("--em", required=True, type=click.Path(exists=True, dir_okay=False),
              help="EM volume (u8 VSV1)")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Trained model (VRF1)")
@membrane_options
@vesicle_options
@click.option("--distance-cap", default=2000.0, show_default=True,
              help=OPTION_HELP["distance_cap"])
@click.option("--save-features", type=click.Path(file_okay=False),
              help=OPTION_HELP["save_features"])
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Probability volume (f32 VSV1) to write")
@click.pass_context
@pretty_errors
def detect_cmd(
    ctx,
    em,
    model_path,
    membrane,
    membrane_threshold,
    membrane_band,
    band_reference,
    vesicles_path,
    distance_cap,
    save_features,
    out,
    **kwargs
):
    """Score every membrane voxel with a trained forest."""
    from vesicle.features import assemble_features, feature_order_tag
    from vesicle.forest import load_model, predict
    from vesicle.lib.enums import FeatureVariant
    from vesicle.vesicles import VesicleSet
    from vesicle.volume import save_volume

    workers = ctx.obj["WORKERS"]
    model = load_model(model_path)
    grid = _load_em(em)
    mask = _membrane_mask(grid, membrane, membrane_threshold, membrane_band, band_reference)

    use_vesicles = model.feature_order_tag != feature_order_tag(FeatureVariant.NoVesicles)
    found = _vesicles(ctx, grid, vesicles_path, **kwargs) if use_vesicles else VesicleSet.empty()
    stack = assemble_features(
        grid, found, cap_nm=distance_cap, use_vesicles=use_vesicles, workers=workers
    )
    if save_features:
        stack.save(save_features)

    prob = predict(model, stack, mask, workers)
    save_volume(prob, out)
    write_run_record(ctx, out)


@vesicle.command("fuse")
@click.option("--prob", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Probability volume (f32 VSV1)")
@fusion_options
@click.option("--becker", is_flag=True, help=OPTION_HELP["becker"])
@click.option("--becker-min-voxels", default=1000, show_default=True,
              help=OPTION_HELP["becker_min_voxels"])
@click.option("--discard-border", callback=parse_triple(int), metavar="PX,PY,PZ",
              help=OPTION_HELP["discard_border"])
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Object manifest stem (writes <stem>.json and <stem>.vsv)")
@click.pass_context
@pretty_errors
def fuse_cmd(
    ctx,
    prob,
    threshold,
    min2d,
    max2d,
    min3d,
    persistence,
    connectivity2d,
    connectivity3d,
    becker,
    becker_min_voxels,
    discard_border,
    out,
):
    """Turn a probability volume into synapse objects."""
    from vesicle.fusion import becker_fuse, discard_border as discard, fuse
    from vesicle.volume import load_volume

    workers = ctx.obj["WORKERS"]
    grid = load_volume(prob)
    if grid.voxel_type != VoxelType.F32:
        raise ParameterError("{}: probability volumes must be f32".format(prob))

    if becker:
        objects = becker_fuse(grid, threshold, becker_min_voxels, int(connectivity3d), workers)
    else:
        params = _fusion_params(
            threshold, min2d, max2d, min3d, persistence, connectivity2d, connectivity3d
        )
        objects = fuse(grid, params, workers)
    if discard_border:
        objects = discard(objects, discard_border)

    stem = out[: -len(".json")] if out.endswith(".json") else out
    objects.save(stem)
    write_run_record(ctx, stem + ".json")
    click.echo("{} objects".format(len(objects)), err=True)


@vesicle.command("eval")
@click.option("--detected", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Detected objects (manifest or u32 label volume)")
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False),
              help="True objects (manifest or u32 label volume)")
@click.option("--min-overlap", default=0.0, show_default=True, help=OPTION_HELP["min_overlap"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CSV to write")
@click.pass_context
@pretty_errors
def eval_cmd(ctx, detected, truth, min_overlap, out):
    """Object-level precision and recall of detections against truth."""
    from vesicle.evaluation import match_objects, precision_recall, write_points_csv
    from vesicle.fusion import ObjectSet

    found = ObjectSet.load(detected)
    expected = ObjectSet.load(truth)
    point = precision_recall(match_objects(found, expected, min_overlap), found.params)
    write_points_csv([point], out)
    write_run_record(ctx, out)
    click.echo(
        "tp={} fp={} fn={} precision={:.4f} recall={:.4f}".format(
            point.tp, point.fp, point.fn, point.precision, point.recall
        )
    )


@vesicle.command("sweep")
@click.option("--prob", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Probability volume (f32 VSV1)")
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False),
              help="True objects (manifest or u32 label volume)")
@click.option("--thresholds", callback=parse_list(float), help=OPTION_HELP["thresholds"])
@click.option("--min2d-values", callback=parse_list(int), help=OPTION_HELP["min2d_values"])
@click.option("--max2d-values", callback=parse_list(int), help=OPTION_HELP["max2d_values"])
@click.option("--min3d-values", callback=parse_list(int), help=OPTION_HELP["min3d_values"])
@click.option("--persistence-values", callback=parse_list(int),
              help=OPTION_HELP["persistence_values"])
@click.option("--connectivity2d", default="8", type=click.Choice(["4", "8"]), show_default=True,
              help=OPTION_HELP["connectivity2d"])
@click.option("--connectivity3d", default="26", type=click.Choice(["6", "18", "26"]),
              show_default=True, help=OPTION_HELP["connectivity3d"])
@click.option("--becker", is_flag=True, help=OPTION_HELP["becker"])
@click.option("--becker-min-voxels", default=1000, show_default=True,
              help=OPTION_HELP["becker_min_voxels"])
@click.option("--min-overlap", default=0.0, show_default=True, help=OPTION_HELP["min_overlap"])
@click.option("--plot", type=click.Path(dir_okay=False), help=OPTION_HELP["plot"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CSV to write")
@click.pass_context
@pretty_errors
def sweep_cmd(
    ctx,
    prob,
    truth,
    thresholds,
    min2d_values,
    max2d_values,
    min3d_values,
    persistence_values,
    connectivity2d,
    connectivity3d,
    becker,
    becker_min_voxels,
    min_overlap,
    plot,
    out,
):
    """Precision and recall over a grid of fusion parameters."""
    from vesicle import evaluation
    from vesicle.fusion import ObjectSet
    from vesicle.volume import load_volume

    workers = ctx.obj["WORKERS"]
    grid = load_volume(prob)
    if grid.voxel_type != VoxelType.F32:
        raise ParameterError("{}: probability volumes must be f32".format(prob))
    expected = ObjectSet.load(truth)

    if becker:
        curve = evaluation.sweep_becker(
            grid, expected, thresholds, becker_min_voxels, min_overlap, workers
        )
    else:
        axes = evaluation.ParameterGrid(
            thresholds or evaluation.DEFAULT_THRESHOLDS,
            min2d_values or evaluation.DEFAULT_MIN2D,
            max2d_values or evaluation.DEFAULT_MAX2D,
            min3d_values or evaluation.DEFAULT_MIN3D,
            persistence_values or evaluation.DEFAULT_PERSISTENCE,
            int(connectivity2d),
            int(connectivity3d),
        )
        curve = evaluation.sweep(grid, expected, axes, min_overlap, workers)

    evaluation.write_points_csv(curve.grid_points, out)
    write_run_record(ctx, out)
    if plot:
        from vesicle.viz import plot_pr_curve

        plot_pr_curve(curve, title="Object precision-recall", path=plot)

    best = curve.best()
    click.echo(
        "best f1={:.4f} precision={:.4f} recall={:.4f} at {}".format(
            best.f1, best.precision, best.recall, best.params.to_dict()
        )
    )


@vesicle.command("blocks-run")
@click.option("--em", required=True, type=click.Path(exists=True, dir_okay=False),
              help="EM volume (u8 VSV1), read block by block")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Trained model (VRF1)")
@membrane_options
@vesicle_options
@fusion_options
@click.option("--block-size", default="256,256,32", callback=parse_triple(int),
              help=OPTION_HELP["block_size"])
@click.option("--pad", default="64,64,5", callback=parse_triple(int), help=OPTION_HELP["pad"])
@click.option("--distance-cap", default=2000.0, show_default=True,
              help=OPTION_HELP["distance_cap"])
@click.option("--resume", is_flag=True, help=OPTION_HELP["resume"])
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory")
@click.pass_context
@pretty_errors
def blocks_run(
    ctx,
    em,
    model_path,
    membrane,
    membrane_threshold,
    membrane_band,
    band_reference,
    vesicles_path,
    threshold,
    min2d,
    max2d,
    min3d,
    persistence,
    connectivity2d,
    connectivity3d,
    block_size,
    pad,
    distance_cap,
    resume,
    out,
    **kwargs
):
    """Detect synapses block by block, for volumes too large to hold in memory."""
    from vesicle import blocks
    from vesicle.forest import load_model
    from vesicle.vesicles import load_vesicles
    from vesicle.volume import BandpassCutoffs

    workers = ctx.obj["WORKERS"]
    if membrane and membrane_band:
        raise ParameterError("Pass either --membrane or --membrane-band, not both")

    model = load_model(model_path)
    provider = blocks.VolumeFileProvider(em)
    params = _fusion_params(
        threshold, min2d, max2d, min3d, persistence, connectivity2d, connectivity3d
    )

    if membrane:
        mask_provider = blocks.VolumeFileProvider(membrane)
        if tuple(mask_provider.dims) != tuple(provider.dims):
            raise ParameterError(
                "Membrane {} and EM {} differ in dims".format(mask_provider.dims, provider.dims)
            )
        policy = blocks.ProviderMaskPolicy(mask_provider, membrane_threshold)
    elif membrane_band:
        labels = None
        if band_reference:
            if band_reference.endswith(".json"):
                labels = blocks.ArrayProvider(_load_labels(band_reference))
            else:
                labels = blocks.VolumeFileProvider(band_reference)
        counts = blocks.intensity_histogram(provider, labels)
        policy = blocks.BandpassMaskPolicy(BandpassCutoffs.from_histogram(counts, *membrane_band))
    else:
        policy = blocks.FullMaskPolicy()

    template = None
    found = None
    if vesicles_path:
        found = load_vesicles(vesicles_path)
    else:
        # exemplar patches need the full EM in memory; the ring template does not
        template = _template(
            _load_em(em) if kwargs["exemplars"] else None,
            kwargs["exemplars"],
            kwargs["template_radius"],
            kwargs["template_thickness"],
            kwargs["template_side"],
        )

    decomp = blocks.decompose(provider.dims, block_size, pad)
    objects = blocks.run_blockwise(
        provider,
        model,
        policy,
        params,
        decomp,
        template=template,
        vesicle_params=_vesicle_params(
            kwargs["vesicle_threshold"],
            kwargs["nms_radius"],
            kwargs["cluster_radius"],
            kwargs["cluster_min"],
        ),
        vesicles=found,
        cap_nm=distance_cap,
        run_dir=out,
        resume=resume,
        workers=workers,
    )
    write_run_record(ctx, out)
    click.echo("{} objects from {} blocks".format(len(objects), len(decomp)), err=True)


@vesicle.command("render")
@click.option("--em", required=True, type=click.Path(exists=True, dir_okay=False),
              help="EM volume (u8 VSV1)")
@click.option("--z", required=True, type=int, help=OPTION_HELP["z"])
@click.option("--detected", type=click.Path(exists=True, dir_okay=False),
              help="Detected objects (manifest or u32 label volume)")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False),
              help="True objects (manifest or u32 label volume)")
@click.option("--vesicles", "vesicles_path", type=click.Path(exists=True, dir_okay=False),
              help="Vesicle centroids to mark")
@click.option("--alpha", default=1.0, show_default=True, help=OPTION_HELP["alpha"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="PNG to write")
@click.pass_context
@pretty_errors
def render(ctx, em, z, detected, truth, vesicles_path, alpha, out):
    """Render one slice with truth (green), detections (blue) and their overlap (red)."""
    from vesicle.fusion import ObjectSet
    from vesicle.vesicles import load_vesicles
    from vesicle.viz import render_overlay

    grid = _load_em(em)
    render_overlay(
        grid,
        z,
        truth=ObjectSet.load(truth) if truth else None,
        detections=ObjectSet.load(detected) if detected else None,
        vesicles=load_vesicles(vesicles_path) if vesicles_path else None,
        alpha=alpha,
        path=out,
    )
    write_run_record(ctx, out)


@vesicle.command("import-png-stack")
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--resolution", default="6,6,30", callback=parse_triple(float),
              help=OPTION_HELP["resolution"])
@click.option("--downsample", default=1, show_default=True, help=OPTION_HELP["downsample"])
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="VSV1 volume to write")
@click.pass_context
@pretty_errors
def import_png_stack(ctx, directory, resolution, downsample, out):
    """Convert a directory of grayscale PNG slices (sorted by name) into a u8 volume."""
    from vesicle.volume import VoxelGrid, downsample_xy, quantize_u8, save_volume

    grid = quantize_u8(downsample_xy(VoxelGrid(read_png_stack(directory), resolution), downsample))
    save_volume(grid, out)
    write_run_record(ctx, out)
    click.echo("{} written with dims {}".format(out, grid.dims), err=True)
