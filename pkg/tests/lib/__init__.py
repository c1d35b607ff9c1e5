# Library tests package initialization