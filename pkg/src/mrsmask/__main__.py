import sys

from mrsmask.cli import main

sys.exit(main())
