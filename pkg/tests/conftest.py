import pytest
import torch

from dvedit.denoiser import ContentUNet, ModelBundle, ModelConfig, MotionModule, StructureAdapter
from dvedit.diffusion import make_linear_schedule

TINY = ModelConfig(
    latent_channels=192,
    widths=(8, 16),
    attention_heads=2,
    embed_dim=8,
    time_dim=16,
    groups=4,
    hint_width=8,
    num_frames=4,
    motion_heads=2,
    motion_ff_mult=2,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def sched():
    return make_linear_schedule()


def randomize(module: torch.nn.Module, seed: int, scale: float = 0.05) -> torch.nn.Module:
    """Perturb every parameter, including zero-initialised projections."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def tiny_bundle(seed: int = 0, structure: bool = True, motion: bool = True, trained: bool = False) -> ModelBundle:
    torch.manual_seed(seed)
    content = ContentUNet(TINY)
    adapter = StructureAdapter.from_content(content) if structure else None
    mot = MotionModule(TINY) if motion else None
    if trained:
        randomize(content, seed + 1)
        if adapter is not None:
            randomize(adapter, seed + 2)
        if mot is not None:
            randomize(mot, seed + 3)
    for m in (content, adapter, mot):
        if m is not None:
            m.requires_grad_(False)
    return ModelBundle(content, adapter, mot)


@pytest.fixture
def bundle_factory():
    return tiny_bundle


# Filled by tests/test_acceptance.py: (criterion number, passed, detail)
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
