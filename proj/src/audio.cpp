#include "stone/audio.hpp"

#include "stone/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#define MA_NO_DEVICE_IO
#define MA_NO_ENGINE
#define MA_NO_NODE_GRAPH
#define MA_NO_RESOURCE_MANAGER
#define MA_NO_GENERATION
#define MA_NO_THREADING
#define MINIAUDIO_IMPLEMENTATION
#include <miniaudio.h>

namespace stone {

AudioClip load_audio(const std::filesystem::path& path, double sample_rate)
{
    if (!std::filesystem::exists(path)) {
        throw DataError("audio file not found: " + path.string());
    }
    ma_decoder_config config =
        ma_decoder_config_init(ma_format_f32, 1, static_cast<ma_uint32>(std::lround(sample_rate)));
    ma_decoder decoder;
    if (ma_decoder_init_file(path.string().c_str(), &config, &decoder) != MA_SUCCESS) {
        throw DataError("cannot decode audio file: " + path.string());
    }

    AudioClip clip;
    clip.sample_rate = sample_rate;
    constexpr ma_uint64 kChunk = 16384;
    std::vector<float> chunk(kChunk);
    for (;;) {
        ma_uint64 read = 0;
        const ma_result result = ma_decoder_read_pcm_frames(&decoder, chunk.data(), kChunk, &read);
        clip.samples.insert(clip.samples.end(), chunk.begin(), chunk.begin() + read);
        if (result != MA_SUCCESS || read < kChunk) {
            break;
        }
    }
    ma_decoder_uninit(&decoder);
    return clip;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip)
{
    ma_encoder_config config =
        ma_encoder_config_init(ma_encoding_format_wav, ma_format_s16, 1,
                               static_cast<ma_uint32>(std::lround(clip.sample_rate)));
    ma_encoder encoder;
    if (ma_encoder_init_file(path.string().c_str(), &config, &encoder) != MA_SUCCESS) {
        throw DataError("cannot write audio file: " + path.string());
    }
    std::vector<std::int16_t> pcm(clip.samples.size());
    std::transform(clip.samples.begin(), clip.samples.end(), pcm.begin(), [](float s) {
        return static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0f, 1.0f) * 32767.0f));
    });
    ma_uint64 written = 0;
    const ma_result result =
        ma_encoder_write_pcm_frames(&encoder, pcm.data(), pcm.size(), &written);
    ma_encoder_uninit(&encoder);
    if (result != MA_SUCCESS || written != pcm.size()) {
        throw DataError("short write to audio file: " + path.string());
    }
}

}  // namespace stone
