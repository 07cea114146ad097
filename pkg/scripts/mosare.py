#!/usr/bin/env python3
"""
MoSARe command line wrapper
Runs services.cli from a source checkout without installing the package
"""

import sys
from pathlib import Path

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from services.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
