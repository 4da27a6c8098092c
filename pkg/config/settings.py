from dotenv import load_dotenv
from pathlib import Path
import os

load_dotenv()

AGENTFORGE_API_KEY = os.getenv("AGENTFORGE_API_KEY")
AGENTFORGE_ENDPOINT = os.getenv(
    "AGENTFORGE_ENDPOINT", "https://api.openai.com/v1/chat/completions"
)
AGENTFORGE_MODEL = os.getenv("AGENTFORGE_MODEL", "gpt-4o")
AGENTFORGE_REQUESTS_PER_MINUTE = int(os.getenv("AGENTFORGE_REQUESTS_PER_MINUTE", 60))
AGENTFORGE_LOG_LEVEL = os.getenv("AGENTFORGE_LOG_LEVEL", "INFO")

# Bundled personas, domain packs, prompt templates and stub scripts
DATA_DIR = Path(os.getenv("AGENTFORGE_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))
