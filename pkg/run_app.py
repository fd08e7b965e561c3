#!/usr/bin/env python3
"""
Startup script for the latent accompaniment lab
Handles Python path setup and dispatches to the command-line interface
"""

import sys
import os
from pathlib import Path

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# Also add backend directory to path
backend_path = project_root / "backend"
sys.path.insert(0, str(backend_path))

# Set environment variables
os.environ["PYTHONPATH"] = f"{project_root}{os.pathsep}{backend_path}"

try:
    from app.cli import main
except ImportError as e:
    print(f"❌ Error importing the lab: {e}")
    print("💡 Please install the dependencies: pip install -r requirements.txt")
    sys.exit(1)

if __name__ == "__main__":
    print("🎛️ Latent accompaniment lab")
    print(f"📁 Project root: {project_root}")
    print("=" * 60)
    sys.exit(main(sys.argv[1:]))
