# Tools package for the video grounding toolkit
