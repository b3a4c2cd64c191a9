import sys

from ikqe.cli import main

sys.exit(main())
