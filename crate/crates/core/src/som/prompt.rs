//! Prompt templates for region labeling and quality-text generation.

/// Candidate types offered to the model, in prompt order. Label matching
/// breaks distance ties in this order.
pub const CANDIDATE_TYPES: [&str; 6] = ["blur", "jitter", "overexposure", "low light", "noise", "no distortion"];

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant to help me evaluate the quality of the image. \
The image is divided into several regions with number marks. You will be given an overall evaluation of the \
quality as reference. Please help to identify the distortions of each region within the following types \
[blur, jitter, overexposure, low light, noise, no distortion]. Please give the result in the following json format:
[{
    \"[mark number]\": \"distortion type\",
    \"gpt4v iqa\": \"message\",
}]
Please note that the distortion type should be one of the five types mentioned above, and the message should \
be a brief evaluation of the quality of the region. Please strictly follow the format, otherwise the result \
will be invalid.";

const USER_PREFIX: &str = "The overall quality reference is: ";
const USER_SUFFIX: &str =
    ". Please help to identify the distortions of each region within the following types [blur, jitter, overexposure, low light, noise, no distortion].";

/// Prompt used to obtain a quality description; `<|image|>` stands for the
/// attached image.
pub const QUALITY_TEXT_PROMPT: &str = "The input image: <|image|>. Describe and evaluate the quality of the image.";

/// System and user messages for labeling the marked regions of one image.
pub fn build_prompts(quality_text: &str) -> (String, String) {
    let mut user = String::with_capacity(USER_PREFIX.len() + quality_text.len() + USER_SUFFIX.len());
    user.push_str(USER_PREFIX);
    user.push_str(quality_text);
    user.push_str(USER_SUFFIX);
    (SYSTEM_PROMPT.to_string(), user)
}
