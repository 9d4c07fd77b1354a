#!/usr/bin/env python3
"""
Run script for flowlab
"""

from main import app

if __name__ == "__main__":
    app()
