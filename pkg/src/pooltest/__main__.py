import sys

from pooltest.cli import main

sys.exit(main())
