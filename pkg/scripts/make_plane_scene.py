"""Regenerate the bundled plane scene used by configs/default.cfg."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Final

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from hisop.scenes import SceneSpec, load_scene_spec, plane_scene_spec, save_scene_spec
from utils.config import SCENE_SUBDIR, get_project_root

PLANE_DEPTH: Final[float] = 3.6
PLANE_SEED: Final[int] = 0
OUTPUT_NAME: Final[str] = "plane.scene"


def build_plane_scene() -> SceneSpec:
    return plane_scene_spec(depth=PLANE_DEPTH, seed=PLANE_SEED)


def main() -> None:
    output_path = get_project_root() / SCENE_SUBDIR / OUTPUT_NAME
    output_path.parent.mkdir(parents=True, exist_ok=True)

    spec = build_plane_scene()
    size = save_scene_spec(spec, output_path)
    print(f"✅ Wrote {output_path} ({size} bytes)")

    #validation: the written file parses back to the same primitives
    reread = load_scene_spec(output_path)
    print(f"   Read back {len(reread.primitives)} primitive(s), {reread.num_classes} classes")


if __name__ == "__main__":
    main()
