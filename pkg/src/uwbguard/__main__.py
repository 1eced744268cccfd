import sys

from uwbguard.cli import main

sys.exit(main())
