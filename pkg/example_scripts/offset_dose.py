#! /usr/bin/env python3

# Pretrains on high-frequency sine targets shifted by an offset, then fine-tunes on a
# fresh zero-offset target and writes the averaged losses to dose.csv.

from pathlib import Path

from plasticity_lab import harness
from plasticity_lab.records import DOSE_FILE, DOSE_HEADER, write_table

offsets = (0, 8, 16, 32)
output = Path("dose_output")
force = True  # overwrite an existing dose.csv

# smaller than the defaults so it finishes in a few minutes
config = harness.DoseConfig(seeds=(0, 1, 2), width=128, depth=3, pretrain_steps=1000, finetune_steps=1000)

rows = harness.run_offset_dose_response(offsets, config)
output.mkdir(exist_ok=True)
path = write_table(output / DOSE_FILE, DOSE_HEADER, (row.row() for row in rows), force=force)
for row in rows:
    print(f"offset {row.treatment:4g}: fine-tune loss {row.finetune_loss:.4f} +- {row.finetune_loss_std:.4f}")
print(f"Written to {path}")
