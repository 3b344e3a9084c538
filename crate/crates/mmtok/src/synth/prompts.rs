//! Prompt templates for the three stage-one chat calls. Slots in braces are
//! filled by the pipeline.

pub const TOPIC_PROMPT: &str = "Please list me 50 **non-academic** conversation topics about {metatopic} between an ordinary person and a helpful chatbot. Each topic should be made up of 1-10 words and the conversation contain understanding and generation of images or music.";

pub const SCENARIO_PROMPT: &str = "You are a creative assistant. I am now asking you to help me brainstorm some chatting scenarios where the user asks the agent for help.
Note that the scenarios should be between ordinary people and a helpful chatbot, and it should not be an academic discussion!
During the conversation, the speakers can use images or music to help convey information (but do not use video!). And the user should ask questions about it if he/she provides an image or a piece of music.
Note that the image should not be a chart.
Note that the images and music should not be the famous masterpieces that may arise copyright issues.

Here are some of my ideas, and please show me more in the same format as mine.

{demonstrations}

Here's the topics for you to try:
{topics}

Now it's your turn. In these scenarios, {requirements}.";

pub const CHAT_PROMPT: &str = "You are helping me to write conversations about a user talking to a chatbot named AnyGPT.

In the conversations, both the user can provide images or music to help express her/his needs and ideas. And the chatbot AnyGPT can also respond to the user with images or music in its utterances.

The images and music in the chat are in the form of image descriptions and music descriptions like [image: description] and [music: description], respectively. The user should provide images and music in this format and the chatbot will respond to the user like this as well.

Note that at most one music appears in one conversation and the description of music should be straightforward, focusing on genres and instruments, and never mention a known music directly.

Before each conversation, I will first show you a scenario and you can start writing about the chat.

Here is an example:
---
{demonstrations}
---

Now it's your turn for the next conversation. You only need to answer following the format in which the user and AnyGPT take turns.
The conversation should be consistent with the introduction to the scenario.
Remember that the utterances should be concise, try to use 5-15 words per utterance.
Note that: the user utterance should always be a question or instruction.
In some turns, the user provides an image or a piece of music and asks a question or makes an instruction to AnyGPT relating to the provided image or music.
In other turns, the user requests AnyGPT to generate the required images or music.
Note that: the description of music should focus on genres, style, and instruments. And make the description of images and music within [image: ] or [music: ] more detailed.
Note that: never directly include a famous person's name in the image descriptions or mention a piece of known music in the music description.
Tips: when the user asks to convert between images and music, AnyGPT should first utter his understanding of the input image or music before generating the requested result.
Keep the dialog in 2 or 3 rounds.
Each dialog should include one music and at most 2 images.

---
In this conversation, {new_scenario_description}

";

pub fn topic_prompt(metatopic: &str) -> String {
    TOPIC_PROMPT.replace("{metatopic}", metatopic)
}

pub fn scenario_prompt(demonstrations: &str, topics: &str, requirements: &str) -> String {
    SCENARIO_PROMPT
        .replace("{demonstrations}", demonstrations)
        .replace("{topics}", topics)
        .replace("{requirements}", requirements)
}

pub fn chat_prompt(demonstrations: &str, scenario: &str) -> String {
    CHAT_PROMPT
        .replace("{demonstrations}", demonstrations)
        .replace("{new_scenario_description}", scenario)
}

/// Requirement pool for scenario generation; "the user share music" is
/// up-weighted twice the others.
pub fn default_requirements() -> Vec<(String, f64)> {
    vec![
        ("the user provide images".to_string(), 1.0),
        ("the user share music".to_string(), 2.0),
        ("the user asks for music".to_string(), 1.0),
        ("the user asks for images".to_string(), 1.0),
    ]
}
