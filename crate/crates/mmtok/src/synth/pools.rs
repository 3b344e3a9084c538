//! Small built-in demonstration pools and meta-topics. The original pools
//! are not published, so these hand-written stand-ins keep the pipeline
//! runnable; callers can load their own from files instead.

pub fn default_metatopics() -> Vec<String> {
    [
        "home decoration",
        "pet care",
        "rainy day moods",
        "street food",
        "morning routines",
        "garden design",
        "road trips",
        "birthday surprises",
        "workout playlists",
        "desk setups",
        "camping",
        "coffee brewing",
        "small talk with neighbors",
        "weekend markets",
        "houseplants",
        "city nightlife",
        "beach days",
        "winter holidays",
        "study focus",
        "cooking for friends",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

pub fn default_scenario_demos() -> Vec<String> {
    [
        "Topic: choosing a sofa color. Scenario: the user shares a photo of their living room and asks the chatbot which sofa color would match, then asks for an image of the room with the suggested sofa.",
        "Topic: calming bedtime sounds. Scenario: the user shares a piece of music they like and asks the chatbot what makes it relaxing, then asks for a similar mellow track for sleeping.",
        "Topic: balcony herb garden. Scenario: the user asks the chatbot for an image of a small balcony herb garden and follow-up advice on arranging the pots.",
        "Topic: birthday party mood. Scenario: the user asks the chatbot to generate upbeat party music and an image of a decorated table for a friend's birthday.",
        "Topic: autumn walk photos. Scenario: the user provides a photo from an autumn walk and asks the chatbot to describe it, then requests music that fits the mood of the picture.",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

pub fn default_dialog_demos() -> Vec<String> {
    [
        "the user shares a photo of their living room and asks for advice.
User: Which sofa color fits this room? [image: a bright living room with white walls and oak floor]
AnyGPT: The room feels warm, so I suggest a deep green sofa.
User: Show me how that would look, please.
AnyGPT: Here you go. [image: the same bright living room with a deep green fabric sofa]",
        "the user shares a piece of music and asks for a similar one.
User: I love this track, what mood is it? [music: slow acoustic guitar with soft rain sounds]
AnyGPT: It is calm and nostalgic, great for quiet evenings.
User: Please make me a similar relaxing piece.
AnyGPT: Enjoy this one. [music: mellow acoustic guitar with gentle piano, lo-fi texture]",
        "the user asks for a picture and matching music for a party.
User: Generate a picture of a small rooftop party at sunset.
AnyGPT: Sure! [image: a rooftop terrace with string lights and friends at sunset]
User: Now some upbeat music to match it?
AnyGPT: Here is a fitting track. [music: upbeat funk with brass and rhythmic guitar]",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}
