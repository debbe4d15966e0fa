#!/usr/bin/env python3
"""Print the decoder cost reports for both published channel schedules."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from deformscan.cost_model import efficiency_report
from deformscan.dmf_decoder import DecoderConfig

for channels in ((96, 192, 384, 768), (256, 512, 1024, 2048)):
    print(f"=== channels {channels} ===")
    print(efficiency_report(DecoderConfig(channels=channels, num_classes=13)))
    print()
