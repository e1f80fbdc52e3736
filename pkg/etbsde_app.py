# etbsde_app.py (repo root)
import sys

from config.lab_controller import main

if __name__ == "__main__":
    sys.exit(main())
