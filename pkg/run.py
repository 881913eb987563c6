#!/usr/bin/env python3
"""
refaudit startup script
"""
import sys

from refaudit.config import settings
from refaudit.main import main

if __name__ == "__main__":
    print("🚀 Starting refaudit...")
    print(f"📂 State directory: {settings.state_dir}")
    print(f"🔑 API key configured: {'yes' if settings.api_key else 'no'}")
    print("=" * 50)

    sys.exit(main(sys.argv[1:]))
