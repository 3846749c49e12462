"""Regenerate the CLI golden fixture under tests/data/golden.

A small synthetic dataset, a briefly trained checkpoint and the exact
`kda eval` output for each mode. Rerun only when a format or model change
intentionally alters the fixture.
"""

import argparse
import contextlib
import io
from pathlib import Path

from kda import cli

ROOT = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden"

SYNTH = """\
seen_count = 4
unseen_count = 2
samples_per_class = 12
audio_dim = 10
visual_dim = 9
text_dim = 8
latent_dim = 3
seed = 7
"""

RUN = """\
max_epochs = 5
batch_size = 16
lr = 0.01
hidden_dim = 12
common_dim = 6
seed = 7
"""


def _run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    if code != 0:
        raise SystemExit(f"kda {' '.join(argv)} exited with {code}")
    return buf.getvalue()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT)
    out = ap.parse_args().out
    out.mkdir(parents=True, exist_ok=True)
    (out / "synth.cfg").write_text(SYNTH)
    (out / "run.cfg").write_text(RUN)
    _run(["gen-synth", "--config", str(out / "synth.cfg"), "--out", str(out)])
    data = ["--features", str(out / "features.jsonl"), "--knowledge", str(out / "knowledge.jsonl"),
            "--split", str(out / "split.json")]
    _run(["train", *data, "--config", str(out / "run.cfg"), "--checkpoint", str(out / "model.kda")])
    for mode in ("both", "gzsl", "zsl"):
        text = _run(["eval", *data, "--checkpoint", str(out / "model.kda"), "--mode", mode])
        (out / f"expected_{mode}.txt").write_text(text)
        print(mode, text.strip())


if __name__ == "__main__":
    main()
