# Database tests package initialization