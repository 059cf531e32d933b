"""Write a seeded refinement parameter file for the [refine] params key.

Usage: python scripts/make_refine_params.py OUTPUT [--channels 12] [--levels 3] [--seed 0]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Final

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from hisop.alignment import RefineParams, load_refine_params, save_refine_params, temporal_reducer
from hisop.scenes import DEFAULT_NUM_CLASSES, DEFAULT_TEXTURE_CHANNELS

DEFAULT_CHANNELS: Final[int] = DEFAULT_TEXTURE_CHANNELS + DEFAULT_NUM_CLASSES
DEFAULT_LEVELS: Final[int] = 3
DEFAULT_WINDOW: Final[int] = 3


def build_refine_params(channels: int, levels: int, seed: int, window: int = DEFAULT_WINDOW) -> RefineParams:
    """Seeded taps over the [current; historical] volume, reduced back to the feature channels."""
    return RefineParams.seeded(
        2 * channels,
        levels=levels,
        window=window,
        seed=seed,
        reducer=temporal_reducer(channels, levels),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("output", type=Path)
    parser.add_argument("--channels", type=int, default=DEFAULT_CHANNELS)
    parser.add_argument("--levels", type=int, default=DEFAULT_LEVELS)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    params = build_refine_params(args.channels, args.levels, args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    size = save_refine_params(params, args.output)
    print(f"✅ Wrote {args.output} ({size} bytes)")

    reread = load_refine_params(args.output)
    print(f"   Read back {reread.level_count} level(s), reducer {reread.reducer.shape}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
