import sys

from tipformer.cli import main

sys.exit(main())
