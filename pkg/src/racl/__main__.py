import sys

from racl.cli import main

sys.exit(main())
