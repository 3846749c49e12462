import pytest

from kda.datahub import SynthConfig, generate_synthetic, save_dataset


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(SynthConfig(seen_count=3, unseen_count=2, samples_per_class=10,
                                          audio_dim=8, visual_dim=7, text_dim=6, latent_dim=2, seed=11))


@pytest.fixture
def dataset_files(tmp_path, small_ds):
    paths = tmp_path / "features.jsonl", tmp_path / "knowledge.jsonl", tmp_path / "split.json"
    save_dataset(small_ds, *paths)
    return paths


# -- acceptance gate bookkeeping ------------------------------------------------
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one check against an acceptance criterion, print its line and return the verdict."""

    def record(number, title, ok, detail=""):
        ACCEPTANCE.setdefault(number, [title, []])[1].append((bool(ok), detail))
        print(f"AC{number} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, checks = ACCEPTANCE[number]
        ok = all(c for c, _ in checks)
        failed = [d for c, d in checks if not c]
        line = f"AC{number} {'PASS' if ok else 'FAIL'} {title} ({sum(c for c, _ in checks)}/{len(checks)} checks)"
        terminalreporter.write_line(line + (f" failing: {'; '.join(failed)}" if failed else ""))
