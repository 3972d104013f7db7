#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "rscope/decoding.hpp"
#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"
#include "rscope/trace.hpp"
#include "rscope/trace_io.hpp"
#include "test_support.hpp"

using namespace rscope;
using namespace rscope::testing;

TEST_CASE("byte tokenizer") {
    const auto tok = Tokenizer::byte_level(300);
    CHECK(tok.encode("ab") == std::vector<TokenId>{97, 98});
    CHECK(Tokenizer::byte_level(300, true).encode("ab") == std::vector<TokenId>{256, 97, 98});

    const std::string utf8 = "h\xC3\xA9llo \xE2\x82\xAC \xF0\x9F\x98\x80 \n\t";
    const auto ids = tok.encode(utf8);
    CHECK(tok.decode(ids) == utf8);

    const std::vector<TokenId> bad{300};
    CHECK_THROWS_AS(tok.decode(bad), InvalidToken);
    CHECK_THROWS_AS(tok.display(300), InvalidToken);
    CHECK(tok.display('a') == "a");
    CHECK(tok.display('\n') == "<0x0A>");
    CHECK(tok.display(257) == "<eos>");
    CHECK(tok.lookup("8") == '8');
    CHECK(tok.lookup("#299") == 299);
    CHECK_THROWS_AS(tok.lookup("#300"), InvalidToken);

    // vocabularies smaller than 256 cannot hold every byte
    const auto tiny = Tokenizer::byte_level(32);
    CHECK_THROWS_AS(tiny.encode("a"), InvalidToken);
    CHECK(tiny.encode("\x1f") == std::vector<TokenId>{31});
}

TEST_CASE("byte tokenizer round-trips arbitrary bytes") {
    std::mt19937_64 rng(1);
    const auto tok = Tokenizer::byte_level(258);
    for (int trial = 0; trial < 200; ++trial) {
        std::string s(rng() % 64, '\0');
        for (auto& c : s) c = static_cast<char>(rng() & 0xff);
        REQUIRE(tok.decode(tok.encode(s)) == s);
    }
}

TEST_CASE("vocab tokenizer uses greedy longest match") {
    const auto tok = Tokenizer::from_vocab({"<bos>", "<eos>", "a", "b", "ab", "abc", " ", "\n"});
    CHECK(tok.encode("abcab a") == std::vector<TokenId>{5, 4, 6, 2});
    CHECK(tok.decode(tok.encode("ab\nb")) == "ab\nb");
    CHECK_THROWS_AS(tok.encode("abz"), InvalidToken);
    CHECK(tok.eos() == 1u);
    CHECK(tok.display(7) == "\\n");
    CHECK(tok.lookup("abc") == 5);
    CHECK(unescape_vocab_line(escape_vocab_entry("x\\y\n")) == "x\\y\n");
}

TEST_CASE("config validation") {
    ModelConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.d_model = 7;
    c.n_heads = 2;
    CHECK_THROWS_WITH_AS(c.validate(), "d_model must be divisible by n_heads", ConfigError);
    c = small_config();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("seeded_random_model is deterministic") {
    const auto cfg = small_config();
    const auto a = seeded_random_model(cfg, 42);
    const auto b = seeded_random_model(cfg, 42);
    const auto c = seeded_random_model(cfg, 43);
    CHECK(weights_payload(cfg, a) == weights_payload(cfg, b));
    CHECK(weights_payload(cfg, a) != weights_payload(cfg, c));

    const auto tied_cfg = small_config(true);
    const auto tied = seeded_random_model(tied_cfg, 42);
    CHECK_FALSE(tied.lm_head.has_value());
    const Model m(tied_cfg, tied, Tokenizer::byte_level(tied_cfg.vocab_size));
    CHECK(*m.output_decoder() == tied.embed.transposed());
    CHECK(m.input_decoder() == m.output_decoder());
}

TEST_CASE("model directory round trip") {
    TempDir dir;
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.vocab_size = 32;
    const auto w = seeded_random_model(cfg, 1);
    save_model(dir.path(), cfg, w);
    const auto loaded = load_model(dir.path());
    CHECK(loaded.config == cfg);
    CHECK(loaded.config.n_layers == 2);
    CHECK(loaded.config.d_model == 8);
    CHECK(loaded.config.vocab_size == 32);
    CHECK(loaded.weights == w);

    SUBCASE("truncated weights") {
        const auto file = dir.path() / "weights.bin";
        std::filesystem::resize_file(file, std::filesystem::file_size(file) - 4);
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("size mismatch"), LoadError);
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("lm_head"), LoadError);
    }
    SUBCASE("corrupted payload") {
        auto bytes = read_file_bytes(dir.path() / "weights.bin");
        bytes[kWeightsHeaderSize + 10] ^= 0x40;
        write_file_bytes(dir.path() / "weights.bin", bytes);
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("checksum"), LoadError);
    }
    SUBCASE("tied config with a separate lm_head") {
        auto tied = cfg;
        tied.tied_embeddings = true;
        const std::string text = config_to_json(tied).dump();
        write_file_bytes(dir.path() / "config.json",
                         {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("lm_head"), LoadError);
    }
    SUBCASE("missing file") {
        std::filesystem::remove(dir.path() / "weights.bin");
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("weights.bin"), LoadError);
    }
    SUBCASE("shape mismatch in config") {
        auto other = cfg;
        other.d_ff = 17;
        const std::string text = config_to_json(other).dump();
        write_file_bytes(dir.path() / "config.json",
                         {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
        CHECK_THROWS_WITH_AS(load_model(dir.path()), doctest::Contains("size mismatch"), LoadError);
    }
}

TEST_CASE("vocab model directory round trip") {
    TempDir dir;
    ModelConfig cfg = small_config();
    cfg.tokenizer = TokenizerKind::vocab;
    cfg.vocab_size = 6;
    const std::vector<std::string> vocab{"<bos>", "<eos>", "a", "b", "\n", "\\"};
    save_model(dir.path(), cfg, seeded_random_model(cfg, 2), vocab);
    const auto m = load_model_shared(dir.path());
    CHECK(m->tokenizer().kind() == TokenizerKind::vocab);
    CHECK(m->tokenizer().decode(m->tokenizer().encode("ab\n\\")) == "ab\n\\");
}

TEST_CASE("interpolated decoder endpoints and midpoint") {
    const auto m = make_model(small_config());
    const std::size_t L = m->config().n_layers;
    CHECK(m->interpolated_decoder(0) == m->input_decoder());
    CHECK(m->interpolated_decoder(L) == m->output_decoder());
    CHECK_THROWS_AS(m->interpolated_decoder(L + 1), InvalidInput);
    const auto mid = m->interpolated_decoder(1);
    const double t = 1.0 / static_cast<double>(L);
    for (std::size_t i = 0; i < mid->size(); i += 37) {
        const double expect = (1 - t) * m->input_decoder()->data()[i] + t * m->output_decoder()->data()[i];
        REQUIRE(std::abs(mid->data()[i] - expect) < 1e-6);
    }
    CHECK(m->interpolated_decoder(1) == mid);  // memoized
}

TEST_CASE("apply_injection identities") {
    std::mt19937_64 rng(4);
    InjectionSpec spec;
    auto unit = [](std::vector<double> v) {
        const double n = l2_norm(std::span<const double>(v));
        for (auto& x : v) x /= n;
        return v;
    };
    for (int trial = 0; trial < 50; ++trial) {
        const auto e_old = unit({rng() % 7 - 3.0, rng() % 5 + 1.0, rng() % 3 - 1.0, 0.5});
        const auto e_new = unit({1.0, rng() % 4 - 2.0, 0.25, rng() % 9 - 4.0});

        // h = e_old gives e_new
        std::vector<float> h(e_old.begin(), e_old.end());
        spec.mode = InjectionMode::component_swap;
        spec.scaled = true;
        auto out = apply_injection(h, spec, e_old, e_new);
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(out[i] - e_new[i]) < 1e-6);

        // h orthogonal to e_old is unchanged
        std::vector<double> hp{0.3, -1.2, 0.7, 2.0};
        const double c = dot(std::span<const double>(hp), std::span<const double>(e_old));
        for (std::size_t i = 0; i < 4; ++i) hp[i] -= c * e_old[i];
        std::vector<float> hf(hp.begin(), hp.end());
        out = apply_injection(hf, spec, e_old, e_new);
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(out[i] - hf[i]) < 1e-7);

        // e_new == e_old leaves h bit-identical in both swap modes
        for (bool scaled : {true, false}) {
            spec.scaled = scaled;
            out = apply_injection(hf, spec, e_old, e_old);
            REQUIRE(out == hf);
        }

        spec.scaled = false;
        out = apply_injection(hf, spec, e_old, e_new);
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(out[i] - (hf[i] + e_new[i] - e_old[i])) < 1e-6);

        spec.mode = InjectionMode::full_replace;
        out = apply_injection(hf, spec, e_old, e_new);
        const double norm = l2_norm(std::span<const float>(hf));
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(out[i] - e_new[i] * norm) < 1e-5);
    }
    const std::vector<double> zero(4, 0.0), one{1, 0, 0, 0};
    const std::vector<float> h{1, 2, 3, 4};
    CHECK_THROWS_AS(apply_injection(h, spec, zero, one), InvalidInput);
    CHECK_THROWS_AS(apply_injection(h, spec, one, zero), InvalidInput);
}

namespace {

void check_residual_accounting(const TraceRecord& t) {
    for (std::size_t l = 1; l <= t.n_layers; ++l) {
        for (std::size_t p = 0; p < t.length(); ++p) {
            const auto prev = t.state(StateKind::x, l - 1, p);
            const auto att = t.state(StateKind::delta_att, l, p);
            const auto mid = t.state(StateKind::intermediate, l, p);
            const auto ff = t.state(StateKind::delta_ff, l, p);
            const auto out = t.state(StateKind::x, l, p);
            for (std::size_t i = 0; i < t.d_model; ++i) {
                // recompute the sums from the captured tensors
                REQUIRE(std::abs(static_cast<double>(prev[i]) + att[i] - mid[i]) <= 1e-5);
                REQUIRE(std::abs(static_cast<double>(mid[i]) + ff[i] - out[i]) <= 1e-5);
            }
        }
    }
}

}  // namespace

TEST_CASE("generate_with_trace captures a consistent trace") {
    const auto m = make_model(small_config());
    const auto prompt = m->tokenizer().encode("hello");
    GenerationSettings s;
    s.max_new_tokens = 10;
    s.stop_at_eos = false;
    const auto t = generate_with_trace(*m, prompt, s);
    CHECK(t.length() == 15);
    CHECK(t.prompt_len == 5);
    CHECK(t.x.size() == 4 * 15 * 16);
    CHECK(t.attention.size() == 3 * 2 * 15 * 15);
    CHECK(t.final_probs.size() == 15 * 300);
    check_residual_accounting(t);

    // embeddings at row 0
    for (std::size_t p = 0; p < t.length(); ++p) {
        const auto x0 = t.state(StateKind::x, 0, p);
        const auto e = m->weights().embed.row(t.tokens[p]);
        REQUIRE(std::equal(x0.begin(), x0.end(), e.begin()));
    }
    // causal stochastic attention rows
    for (std::size_t l = 1; l <= 3; ++l) {
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < t.length(); ++i) {
                const auto row = t.attention_row(l, h, i);
                double sum = 0.0;
                for (std::size_t j = 0; j < row.size(); ++j) {
                    if (j > i) REQUIRE(row[j] == 0.0f);
                    REQUIRE(row[j] >= 0.0f);
                    sum += row[j];
                }
                REQUIRE(std::abs(sum - 1.0) < 1e-5);
            }
        }
    }
    // greedy picks the argmax of the preceding output distribution
    for (std::size_t p = t.prompt_len; p < t.length(); ++p) {
        const auto probs = t.output_distribution(p - 1);
        const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
        REQUIRE(static_cast<TokenId>(best) == t.tokens[p]);
    }
    CHECK_THROWS_AS(t.state(StateKind::delta_att, 0, 0), InvalidInput);
    CHECK_THROWS_AS(t.state(StateKind::x, 4, 0), InvalidInput);
    CHECK_THROWS_AS(t.state(StateKind::x, 0, 15), InvalidInput);
}

TEST_CASE("generation is deterministic and traces serialize byte-identically") {
    const auto m = make_model(small_config());
    const auto prompt = m->tokenizer().encode("abc");
    GenerationSettings s;
    s.max_new_tokens = 8;
    s.temperature = 0.9;
    s.top_k = 20;
    s.seed = 1234;
    const auto a = generate_with_trace(*m, prompt, s);
    const auto b = generate_with_trace(*m, prompt, s);
    CHECK(serialize_trace(a) == serialize_trace(b));
    CHECK(a.id == b.id);
    s.seed = 1235;
    const auto c = generate_with_trace(*m, prompt, s);
    CHECK(c.id != a.id);
}

TEST_CASE("trace file round trip") {
    const auto m = make_model(small_config());
    GenerationSettings s;
    s.max_new_tokens = 4;
    InjectionSpec inj;
    inj.layer = 2;
    inj.position = 1;
    inj.new_token = 'z';
    const std::vector<InjectionSpec> injections{inj};
    const auto t = generate_with_trace(*m, m->tokenizer().encode("xy"), s, injections, "toy");
    TempDir dir;
    save_trace(dir.path() / "t.trace", t);
    const auto back = load_trace(dir.path() / "t.trace");
    CHECK(back == t);
    CHECK(back.injections.at(0).removed_token.has_value());

    auto bytes = serialize_trace(t);
    bytes.pop_back();
    CHECK_THROWS_AS(deserialize_trace(bytes), LoadError);
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_trace(bytes), LoadError);
}

TEST_CASE("causal masking: appended tokens leave earlier columns unchanged") {
    const auto m = make_model(small_config());
    GenerationSettings s;
    s.max_new_tokens = 0;
    const auto short_ids = m->tokenizer().encode("the cat");
    const auto long_ids = m->tokenizer().encode("the cat sat on");
    const auto a = generate_with_trace(*m, short_ids, s);
    const auto b = generate_with_trace(*m, long_ids, s);
    for (auto kind : {StateKind::x, StateKind::intermediate, StateKind::delta_att, StateKind::delta_ff}) {
        for (std::size_t l = kind == StateKind::x ? 0 : 1; l <= 3; ++l) {
            for (std::size_t p = 0; p < a.length(); ++p) {
                const auto u = a.state(kind, l, p);
                const auto v = b.state(kind, l, p);
                for (std::size_t i = 0; i < u.size(); ++i) REQUIRE(std::abs(u[i] - v[i]) <= 1e-6);
            }
        }
    }
}

TEST_CASE("generation errors") {
    const auto m = make_model(small_config());
    GenerationSettings s;
    s.max_new_tokens = 10;
    const std::vector<TokenId> empty;
    CHECK_THROWS_AS(generate_with_trace(*m, empty, s), InvalidInput);
    const std::vector<TokenId> long_prompt(40, 'a');
    CHECK_THROWS_AS(generate_with_trace(*m, long_prompt, s), ContextOverflow);
    const std::vector<TokenId> bad{1000};
    CHECK_THROWS_AS(generate_with_trace(*m, bad, s), InvalidToken);

    const auto prompt = m->tokenizer().encode("hi");
    InjectionSpec inj;
    inj.layer = 0;
    std::vector<InjectionSpec> list{inj};
    CHECK_THROWS_AS(generate_with_trace(*m, prompt, s, list), InvalidInjection);
    list[0].layer = 4;
    CHECK_THROWS_AS(generate_with_trace(*m, prompt, s, list), InvalidInjection);
    list[0].layer = 1;
    list[0].position = 12;
    CHECK_THROWS_AS(generate_with_trace(*m, prompt, s, list), InvalidInjection);
    list[0].position = 0;
    list[0].new_token = 300;
    CHECK_THROWS_AS(generate_with_trace(*m, prompt, s, list), InvalidInjection);
}

TEST_CASE("injection of the current argmax is a no-op at every site") {
    const auto m = make_model(small_config());
    const auto prompt = m->tokenizer().encode("number 1384");
    GenerationSettings s;
    s.max_new_tokens = 6;
    s.stop_at_eos = false;
    const auto base = generate_with_trace(*m, prompt, s);
    for (auto kind : {StateKind::x, StateKind::intermediate, StateKind::delta_att, StateKind::delta_ff}) {
        for (std::size_t l = 1; l <= 3; ++l) {
            for (std::size_t p : {std::size_t{0}, std::size_t{5}, base.length() - 2}) {
                for (bool scaled : {true, false}) {
                    InjectionSpec inj;
                    inj.layer = l;
                    inj.position = p;
                    inj.state_kind = kind;
                    inj.scaled = scaled;
                    inj.new_token = decode_argmax(*m, inj.decoder, base.state(kind, l, p), l).token;
                    const std::vector<InjectionSpec> list{inj};
                    const auto t = generate_with_trace(*m, prompt, s, list);
                    REQUIRE(t.tokens == base.tokens);
                    REQUIRE(t.x == base.x);
                    REQUIRE(t.delta_ff == base.delta_ff);
                    REQUIRE(t.injections[0].removed_token == inj.new_token);
                }
            }
        }
    }
}

TEST_CASE("a real injection changes the injected state and keeps the accounting") {
    const auto m = make_model(small_config());
    const auto prompt = m->tokenizer().encode("number 1384");
    GenerationSettings s;
    s.max_new_tokens = 6;
    s.stop_at_eos = false;
    const auto base = generate_with_trace(*m, prompt, s);
    for (auto kind : {StateKind::x, StateKind::intermediate, StateKind::delta_att, StateKind::delta_ff}) {
        for (auto mode : {InjectionMode::component_swap, InjectionMode::full_replace}) {
            InjectionSpec inj;
            inj.layer = 2;
            inj.position = 4;
            inj.state_kind = kind;
            inj.mode = mode;
            const TokenId old = decode_argmax(*m, inj.decoder, base.state(kind, 2, 4), 2).token;
            inj.new_token = old == 'Q' ? 'R' : 'Q';
            const std::vector<InjectionSpec> list{inj};
            const auto t = generate_with_trace(*m, prompt, s, list);
            check_residual_accounting(t);
            // columns before the injected position are untouched
            for (std::size_t p = 0; p < 4; ++p) {
                const auto a = base.state(StateKind::x, 3, p);
                const auto b = t.state(StateKind::x, 3, p);
                REQUIRE(std::equal(a.begin(), a.end(), b.begin()));
            }
            const auto a = base.state(kind, 2, 4);
            const auto b = t.state(kind, 2, 4);
            CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
            if (mode == InjectionMode::full_replace) {
                CHECK(l2_norm(b) == doctest::Approx(l2_norm(a)).epsilon(1e-5));
                CHECK(decode_argmax(*m, inj.decoder, b, 2).token == inj.new_token);
            }
        }
    }
}
