"""Motion editing by embedding optimization and model fine-tuning."""

from ._core import (
    EditConfig,
    EditSession,
    Error,
    Motion,
    __version__,
    build_corpus,
    build_weights,
    combine_clip,
    combine_static_pose,
    create_session,
    default_schedule,
    edit_input_kinds,
    gen_edit_input,
    gen_motion,
    layout_dims,
    load_checkpoint,
    load_motion,
    load_session,
    pad_set,
    posterior_mean,
    q_sample,
    rotation_indices,
    run_cli,
    save_motion,
    Schedule,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
