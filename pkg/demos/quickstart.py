"""Train the head on a small world and print the per-task table.

Run: python3 demos/quickstart.py [out_dir]
"""

import sys

from owdet.experiment import format_summary, parse_config, run_experiment, default_config

SMALL = """
[world]
scenes_per_task = 80
test_scenes = 60
[train]
steps = 400
replay_steps = 200
"""


def main(out_dir=None):
    cfg = parse_config(SMALL, base=default_config())
    result = run_experiment(cfg, out_dir)
    print(format_summary(result.reports))
    if out_dir:
        print(f"artifacts written to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
