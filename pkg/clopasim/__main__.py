import sys

from clopasim.cli import main

sys.exit(main())
