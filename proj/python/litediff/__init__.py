"""Python access to the litediff core: data, schedule, losses, metrics,
configs, checkpoints and the command-line tool."""

import json

from ._litediff import (
    CheckpointError,
    ConfigError,
    PgmError,
    ablation_patterns,
    adversarial_loss,
    config_keys,
    config_text,
    decode_pgm,
    discriminator_loss,
    encode_pgm,
    fit_gaussian,
    frechet_distance,
    generate,
    morph_loss,
    read_report,
    resolve_pattern,
    run_cli,
    schedule,
    total_gen_loss,
    trainable_fraction,
)
from ._litediff import parse_config as _parse_config
from ._litediff import read_checkpoint as _read_checkpoint


def parse_config(text):
    """Config text to a dict of canonical string values."""
    return json.loads(_parse_config(text))


def load_checkpoint(path):
    """Returns (meta dict, {name: ndarray})."""
    meta, tensors = _read_checkpoint(str(path))
    return json.loads(meta), tensors


def main(argv=None):
    import sys

    return run_cli(list(sys.argv[1:] if argv is None else argv))
