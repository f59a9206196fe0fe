"""Python access to the mega C++ core."""

from ._core import (  # noqa: F401
    ExperimentConfig,
    MegaError,
    NumericError,
    binarize,
    cosine_attention,
    generate_scene,
    memory_loss,
    read,
    read_map,
    run,
    summarize,
    write,
)
