import os
import sys

# Add the src directory to Python path
project_root = os.path.dirname(__file__)
src_path = os.path.join(project_root, 'src')

if src_path not in sys.path:
    sys.path.insert(0, src_path)

# Import after setting up path
from ctxdesc.cli import main

if __name__ == '__main__':
    sys.exit(main())
