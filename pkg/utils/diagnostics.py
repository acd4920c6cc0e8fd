# diagnostics.py
"""Per-step dump of an edit run: latents, masks, a CSV table and a coverage chart."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from config import RunConfig, save_config
from editor import EditDiagnostics
from storage import write_pgm, write_tensor
from utils.checksum import short_checksum, tensor_digest


def steps_table(diagnostics: EditDiagnostics) -> pd.DataFrame:
    rows = [
        {
            "step": record.step,
            "target_coverage": record.target_coverage,
            "blend_coverage": record.blend_coverage,
            "latent_checksum": short_checksum(tensor_digest(record.latent)),
        }
        for record in diagnostics.steps
    ]
    return pd.DataFrame(rows, columns=["step", "target_coverage", "blend_coverage", "latent_checksum"])


def coverage_figure(table: pd.DataFrame) -> Figure:
    figure = Figure(figsize=(8, 3), dpi=100)
    ax = figure.add_subplot(111)

    if table.empty:
        ax.text(0.5, 0.5, 'No steps recorded', ha='center', va='center', transform=ax.transAxes, fontsize=12, color='gray')
        ax.set_xticks([])
    else:
        ax.plot(table["step"], table["target_coverage"], marker='o', linewidth=2, markersize=4, label='target mask')
        ax.plot(table["step"], table["blend_coverage"], marker='s', linewidth=2, markersize=4, label='blend mask')
        ax.fill_between(table["step"], table["blend_coverage"], alpha=0.3)
        ax.invert_xaxis()  # denoising runs T -> 1
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc='best', fontsize=9)

    ax.set_title('Mask coverage per step', fontsize=12, fontweight='bold')
    ax.set_xlabel('Sampling step t', fontsize=10)
    ax.set_ylabel('Active fraction', fontsize=10)
    ax.grid(True, alpha=0.3)
    figure.tight_layout()
    return figure


def write_dump(dump_dir, diagnostics: EditDiagnostics, config: RunConfig):
    """
    latent_tNNN.sprf holds the latent produced by step NNN (timestep NNN - 1);
    target_mask_tNNN.sprf and blend_mask_tNNN.pgm are the masks used by it.
    """
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)

    for record in diagnostics.steps:
        write_tensor(dump_dir / f"latent_t{record.step:03d}.sprf", record.latent)
        write_tensor(dump_dir / f"target_mask_t{record.step:03d}.sprf", record.target_mask.float())
        pixels = record.blend_mask.numpy().astype(np.uint8) * 255
        write_pgm(dump_dir / f"blend_mask_t{record.step:03d}.pgm", pixels)

    table = steps_table(diagnostics)
    table.to_csv(dump_dir / "steps.csv", index=False, float_format="%.6f")
    # no Software tag, so reruns produce identical bytes
    coverage_figure(table).savefig(dump_dir / "coverage.png", format="png", metadata={"Software": None})
    save_config(config, dump_dir / "run.cfg")
    logging.info("Diagnostics for %d steps written to %s", len(diagnostics.steps), dump_dir)
