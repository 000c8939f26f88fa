import torch


def rand_windows(cfg, b, l, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, l, cfg.n_frames, cfg.n_features, generator=g, dtype=dtype)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, name: str, ok: bool, detail: str) -> bool:
    line = f"C{criterion:<2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
